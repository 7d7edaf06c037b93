//! Planted-keyword synthetic corpora.
//!
//! Each document draws a topic mixture over T topics and samples ordinary
//! words from it; the dominant topic (by realized token counts) fires one
//! coarse label. Independently, trigger keywords are planted at random
//! positions and each fires its own fine-grained label. Ground-truth labels
//! are therefore an exact function of the emitted text, which
//! [`implied_labels`] recomputes independently of the generator.

use std::collections::HashMap;

use crate::data::{Corpus, Example};
use crate::error::{Error, Result};
use crate::numerics::rng::{splitmix64, Rng};

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub num_docs: usize,
    pub num_labels: usize,
    /// Ordinary word types; word `i` belongs to topic `i mod T`.
    pub vocab_size: usize,
    /// Inclusive range of ordinary tokens per document.
    pub doc_len: (usize, usize),
    /// Fine-grained rules: planting `token` fires `label`.
    pub keyword_map: Vec<(usize, String)>,
    /// Coarse rules: dominant topic `t` fires `topic_rules[t]`.
    pub topic_rules: Vec<usize>,
    /// Per-label flip probability applied to the implied label set.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Conventional layout: the first ⌈L/5⌉ labels are topic labels, the
    /// rest are keyword labels with triggers `kw000`, `kw001`, ….
    pub fn standard(
        num_docs: usize,
        num_labels: usize,
        vocab_size: usize,
        doc_len: (usize, usize),
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        let topics = (num_labels / 5).max(1).min(num_labels);
        let spec = SyntheticSpec {
            num_docs,
            num_labels,
            vocab_size,
            doc_len,
            keyword_map: (topics..num_labels)
                .map(|l| (l, format!("kw{:03}", l - topics)))
                .collect(),
            topic_rules: (0..topics).collect(),
            noise,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Validation {
                op: "SyntheticSpec",
                msg,
            })
        };
        if self.num_docs == 0 {
            return fail("num_docs must be positive".into());
        }
        if self.num_labels == 0 {
            return fail("num_labels must be positive".into());
        }
        if self.topic_rules.is_empty() {
            return fail("at least one topic rule is required".into());
        }
        if self.vocab_size < self.topic_rules.len() {
            return fail(format!(
                "vocab_size {} cannot cover {} topics",
                self.vocab_size,
                self.topic_rules.len()
            ));
        }
        if self.doc_len.0 == 0 || self.doc_len.0 > self.doc_len.1 {
            return fail(format!(
                "doc_len range ({}, {}) is not a valid inclusive range",
                self.doc_len.0, self.doc_len.1
            ));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return fail(format!("noise must lie in [0, 1), got {}", self.noise));
        }
        for &label in &self.topic_rules {
            if label >= self.num_labels {
                return fail(format!("topic rule fires label {label} ≥ {}", self.num_labels));
            }
        }
        let mut seen = HashMap::new();
        for (label, token) in &self.keyword_map {
            if *label >= self.num_labels {
                return fail(format!("keyword rule fires label {label} ≥ {}", self.num_labels));
            }
            if token.is_empty()
                || !token
                    .chars()
                    .all(|c| c.is_alphanumeric() && !c.is_uppercase())
            {
                return fail(format!(
                    "keyword token {token:?} must be lowercase alphanumeric so it survives tokenization"
                ));
            }
            if let Some(other) = seen.insert(token.clone(), *label) {
                return fail(format!(
                    "keyword token {token:?} used by labels {other} and {label}"
                ));
            }
        }
        Ok(())
    }

    fn word(&self, index: usize) -> String {
        format!("w{index:05}")
    }

    /// Human-readable names for the label space.
    pub fn label_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.num_labels).map(|l| format!("label{l}")).collect();
        for (t, &label) in self.topic_rules.iter().enumerate() {
            names[label] = format!("topic{t}");
        }
        for (label, token) in &self.keyword_map {
            names[*label] = format!("kw:{token}");
        }
        names
    }
}

/// Labels implied by the text alone: the dominant-topic rule plus every
/// keyword rule whose trigger occurs. Ties on topic counts go to the
/// lowest topic id.
pub fn implied_labels(spec: &SyntheticSpec, text: &str) -> Vec<usize> {
    let topics = spec.topic_rules.len();
    let tokens = crate::data::tokenize(text);
    let mut counts = vec![0usize; topics];
    for tok in &tokens {
        if let Some(idx) = tok
            .strip_prefix('w')
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&i| i < spec.vocab_size && tok == &spec.word(i))
        {
            counts[idx % topics] += 1;
        }
    }
    let mut labels = Vec::new();
    if let Some(best) = counts.iter().max().filter(|&&c| c > 0) {
        let t = counts.iter().position(|c| c == best).expect("max exists");
        labels.push(spec.topic_rules[t]);
    }
    for (label, token) in &spec.keyword_map {
        if tokens.iter().any(|t| t == token) {
            labels.push(*label);
        }
    }
    labels.sort_unstable();
    labels.dedup();
    labels
}

/// Generate the corpus and split it 80/20 by a hash of the document index.
/// Deterministic in `spec.seed`; the test split is exactly ⌊num_docs/5⌋.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Corpus, Corpus)> {
    spec.validate()?;
    let topics = spec.topic_rules.len();
    let topic_word_count: Vec<usize> = (0..topics)
        .map(|t| (spec.vocab_size - t).div_ceil(topics))
        .collect();
    let plant_prob = if spec.keyword_map.is_empty() {
        0.0
    } else {
        (2.0 / spec.keyword_map.len() as f64).min(1.0)
    };

    let mut docs = Vec::with_capacity(spec.num_docs);
    for doc in 0..spec.num_docs {
        let mut rng = Rng::substream(spec.seed, "synthetic-doc", doc as u64);

        // Cubing sharpens the mixture so most documents have a clear
        // dominant topic while the rest stay genuinely mixed.
        let mut mix: Vec<f64> = (0..topics).map(|_| rng.uniform().powi(3) + 1e-12).collect();
        let total: f64 = mix.iter().sum();
        for w in &mut mix {
            *w /= total;
        }

        let span = spec.doc_len.1 - spec.doc_len.0 + 1;
        let len = spec.doc_len.0 + rng.below(span);
        let mut tokens = Vec::with_capacity(len + 4);
        for _ in 0..len {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut topic = topics - 1;
            for (t, w) in mix.iter().enumerate() {
                acc += w;
                if u < acc {
                    topic = t;
                    break;
                }
            }
            let pick = rng.below(topic_word_count[topic]);
            tokens.push(spec.word(topic + pick * topics));
        }
        for (_, token) in &spec.keyword_map {
            if rng.uniform() < plant_prob {
                let at = rng.below(tokens.len() + 1);
                tokens.insert(at, token.clone());
            }
        }

        let text = tokens.join(" ");
        let implied = implied_labels(spec, &text);
        let mut labels = implied.clone();
        if spec.noise > 0.0 {
            for l in 0..spec.num_labels {
                if rng.uniform() < spec.noise {
                    match labels.binary_search(&l) {
                        Ok(at) => {
                            labels.remove(at);
                        }
                        Err(at) => labels.insert(at, l),
                    }
                }
            }
            if labels.is_empty() {
                labels = implied;
            }
        }
        docs.push(Example::new(labels, text));
    }

    // Rank documents by a hash of their index; the smallest fifth is the
    // test split. Exact sizes, stable under regeneration.
    let n_test = spec.num_docs / 5;
    let mut ranked: Vec<usize> = (0..spec.num_docs).collect();
    let hash = |i: usize| splitmix64(spec.seed.wrapping_add(((i as u64) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    ranked.sort_by_key(|&i| (hash(i), i));
    let mut is_test = vec![false; spec.num_docs];
    for &i in &ranked[..n_test] {
        is_test[i] = true;
    }

    let names = spec.label_names();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, ex) in docs.into_iter().enumerate() {
        if is_test[i] {
            test.push(ex);
        } else {
            train.push(ex);
        }
    }
    Ok((
        Corpus {
            examples: train,
            num_labels: spec.num_labels,
            label_names: Some(names.clone()),
        },
        Corpus {
            examples: test,
            num_labels: spec.num_labels,
            label_names: Some(names),
        },
    ))
}
