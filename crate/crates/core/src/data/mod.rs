//! Corpus ingestion, vocabulary, tokenization, and batching.
//!
//! Corpus files are UTF-8 with one example per line: `lab1,lab2,…<TAB>text`,
//! labels as base-10 ids. Vocab files hold one token per line; the line
//! index is `id − 3` because ids 0..3 are reserved for [CLS]/[PAD]/[UNK].

pub mod synthetic;

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;

pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const RESERVED: usize = 3;

pub const CLS_TOKEN: &str = "[CLS]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

/// One document: its label set, raw text, and (after [`Corpus::encode_with`])
/// the padded id sequence with validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Sorted, deduplicated label ids in `[0, L)`.
    pub labels: Vec<usize>,
    pub text: String,
    /// `[CLS]` + content ids + `[PAD]`s, fixed length; empty until encoded.
    pub token_ids: Vec<usize>,
    /// True at `[CLS]` and content positions, false at padding.
    pub mask: Vec<bool>,
}

impl Example {
    pub fn new(mut labels: Vec<usize>, text: String) -> Self {
        labels.sort_unstable();
        labels.dedup();
        Example {
            labels,
            text,
            token_ids: Vec::new(),
            mask: Vec::new(),
        }
    }

    pub fn is_encoded(&self) -> bool {
        !self.token_ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub num_labels: usize,
    pub label_names: Option<Vec<String>>,
}

impl Corpus {
    /// Tokenize and pad every example in place.
    pub fn encode_with(&mut self, vocab: &Vocab, max_len: usize) -> Result<()> {
        for ex in &mut self.examples {
            let (ids, mask) = encode(vocab, &ex.text, max_len)?;
            ex.token_ids = ids;
            ex.mask = mask;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Lowercase the text and split it into maximal alphanumeric runs.
/// Punctuation and whitespace both act as separators and are dropped, so
/// raw text can never produce a bracketed reserved token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Word-level vocabulary with three reserved ids.
#[derive(Clone, Debug)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    fn with_tokens(tokens: Vec<String>) -> Self {
        let mut id_to_token =
            vec![CLS_TOKEN.to_owned(), PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(RESERVED)
            .map(|(id, t)| (t.clone(), id))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    /// Total number of ids, reserved included.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Write the non-reserved tokens, one per line, id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.id_to_token[RESERVED..] {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Read a vocab file written by [`Vocab::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        let mut seen = HashMap::new();
        for (i, line) in raw.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "empty token".into(),
                });
            }
            if let Some(prev) = seen.insert(t.to_owned(), i + 1) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("duplicate token {t:?} (first at line {prev})"),
                });
            }
            tokens.push(t.to_owned());
        }
        Ok(Vocab::with_tokens(tokens))
    }
}

/// Count lowercased word tokens across the corpus and keep those with
/// frequency ≥ `min_freq`, most frequent first (ties lexicographic),
/// at most `max_size` beyond the reserved ids.
pub fn build_vocab(corpus: &Corpus, min_freq: usize, max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Validation {
            op: "build_vocab",
            msg: "corpus has no examples".into(),
        });
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for ex in &corpus.examples {
        for tok in tokenize(&ex.text) {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let mut items: Vec<(String, usize)> =
        freq.into_iter().filter(|&(_, n)| n >= min_freq).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items.truncate(max_size);
    Ok(Vocab::with_tokens(items.into_iter().map(|(t, _)| t).collect()))
}

/// `[CLS]` + token ids (unknown → `[UNK]`), truncated to `max_len − 1`
/// content tokens, padded with `[PAD]` to exactly `max_len`.
pub fn encode(vocab: &Vocab, text: &str, max_len: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    if max_len < 2 {
        return Err(Error::Validation {
            op: "encode",
            msg: format!("max_len must be at least 2, got {max_len}"),
        });
    }
    let mut ids = Vec::with_capacity(max_len);
    let mut mask = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    mask.push(true);
    for tok in tokenize(text).into_iter().take(max_len - 1) {
        ids.push(vocab.id_of(&tok).unwrap_or(UNK_ID));
        mask.push(true);
    }
    while ids.len() < max_len {
        ids.push(PAD_ID);
        mask.push(false);
    }
    Ok((ids, mask))
}

/// Map an encoded id sequence back to tokens: `[CLS]` and `[PAD]` are
/// dropped, unknown ids render as the `[UNK]` marker.
pub fn decode(vocab: &Vocab, token_ids: &[usize]) -> Vec<String> {
    token_ids
        .iter()
        .filter(|&&id| id != CLS_ID && id != PAD_ID)
        .map(|&id| {
            vocab
                .token_of(id)
                .unwrap_or(UNK_TOKEN)
                .to_owned()
        })
        .collect()
}

/// Parse a corpus file. Each line is `lab1,lab2,…<TAB>text`; labels must
/// be `< label_space_size`. Tokenization is deferred to [`Corpus::encode_with`].
pub fn load_corpus(path: &Path, label_space_size: usize) -> Result<Corpus> {
    if label_space_size == 0 {
        return Err(Error::Validation {
            op: "load_corpus",
            msg: "label space must have at least one label".into(),
        });
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let Some((label_part, text)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: "missing TAB between labels and text".into(),
            });
        };
        if label_part.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: "empty label field".into(),
            });
        }
        let mut labels = Vec::new();
        for piece in label_part.split(',') {
            let id: usize = piece.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("invalid label id {piece:?}"),
            })?;
            if id >= label_space_size {
                return Err(Error::Range {
                    op: "load_corpus",
                    msg: format!(
                        "{}:{lineno}: label id {id} outside label space of size {label_space_size}",
                        path.display()
                    ),
                });
            }
            labels.push(id);
        }
        examples.push(Example::new(labels, text.to_owned()));
    }
    Ok(Corpus {
        examples,
        num_labels: label_space_size,
        label_names: None,
    })
}

/// Write a corpus in the line format read by [`load_corpus`].
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for ex in &corpus.examples {
        let labels = ex
            .labels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "{labels}\t{}", ex.text).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Deterministic batch order over example indices. `shuffle_seed = None`
/// keeps corpus order; the final partial batch is emitted.
pub fn batches(
    n_examples: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<impl Iterator<Item = Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Validation {
            op: "batches",
            msg: "batch_size must be positive".into(),
        });
    }
    let mut order: Vec<usize> = (0..n_examples).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = Rng::new(seed);
        rng.shuffle(&mut order);
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_of(texts: &[&str]) -> Corpus {
        Corpus {
            examples: texts
                .iter()
                .map(|t| Example::new(vec![0], (*t).to_owned()))
                .collect(),
            num_labels: 1,
            label_names: None,
        }
    }

    #[test]
    fn tokenizer_lowercases_and_splits_on_punctuation() {
        assert_eq!(tokenize("Hello, world!"), ["hello", "world"]);
        assert_eq!(tokenize("don't stop"), ["don", "t", "stop"]);
        assert_eq!(tokenize("  [CLS] "), ["cls"]);
        assert_eq!(tokenize("a1-b2"), ["a1", "b2"]);
        assert!(tokenize(" …—! ").is_empty());
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographically() {
        let v = build_vocab(&corpus_of(&["a a b"]), 1, 100).unwrap();
        assert_eq!(v.id_of("a"), Some(3));
        assert_eq!(v.id_of("b"), Some(4));

        let v = build_vocab(&corpus_of(&["a a b"]), 2, 100).unwrap();
        assert_eq!(v.id_of("a"), Some(3));
        assert_eq!(v.id_of("b"), None);
        assert_eq!(v.len(), 4);

        // c and b tie at frequency 1: b first
        let v = build_vocab(&corpus_of(&["c b"]), 1, 100).unwrap();
        assert_eq!(v.id_of("b"), Some(3));
        assert_eq!(v.id_of("c"), Some(4));

        // cap applies after ordering
        let v = build_vocab(&corpus_of(&["x x y z"]), 1, 1).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id_of("x"), Some(3));
        assert_eq!(v.id_of("y"), None);
    }

    #[test]
    fn encode_pads_truncates_and_substitutes_unk() {
        let v = build_vocab(&corpus_of(&["a a b"]), 1, 100).unwrap();
        let (ids, mask) = encode(&v, "a b", 5).unwrap();
        assert_eq!(ids, [CLS_ID, 3, 4, PAD_ID, PAD_ID]);
        assert_eq!(mask, [true, true, true, false, false]);

        let (ids, _) = encode(&v, "a mystery b", 5).unwrap();
        assert_eq!(ids, [CLS_ID, 3, UNK_ID, 4, PAD_ID]);

        let (ids, mask) = encode(&v, "b b b b b b", 4).unwrap();
        assert_eq!(ids, [CLS_ID, 4, 4, 4]);
        assert!(mask.iter().all(|&m| m));

        assert!(matches!(
            encode(&v, "a", 1),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn decode_round_trips_up_to_truncation_and_unk() {
        let v = build_vocab(&corpus_of(&["alpha beta gamma"]), 1, 100).unwrap();
        let text = "Alpha, DELTA beta gamma alpha beta";
        let max_len = 5;
        let (ids, _) = encode(&v, text, max_len).unwrap();
        let got = decode(&v, &ids);
        let want: Vec<String> = tokenize(text)
            .into_iter()
            .take(max_len - 1)
            .map(|t| {
                if v.id_of(&t).is_some() {
                    t
                } else {
                    UNK_TOKEN.to_owned()
                }
            })
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(&corpus_of(&["one two two three three three"]), 1, 100).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v.len(), loaded.len());
        for id in 0..v.len() {
            assert_eq!(v.token_of(id), loaded.token_of(id));
        }
        // line number = id − 3
        let raw = std::fs::read_to_string(&path).unwrap();
        let first = raw.lines().next().unwrap();
        assert_eq!(v.id_of(first), Some(3));
    }

    #[test]
    fn corpus_parsing_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");

        std::fs::write(&path, "3,7\thello world\n1\tsecond doc\n0,1,2\tthird one\n").unwrap();
        let c = load_corpus(&path, 10).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.examples[0].labels, [3, 7]);
        assert_eq!(c.examples[0].text, "hello world");
        assert!(!c.examples[0].is_encoded());

        std::fs::write(&path, "no tab here\n").unwrap();
        let err = load_corpus(&path, 10).unwrap_err();
        assert!(err.to_string().contains("corpus.tsv:1"), "{err}");

        std::fs::write(&path, "\thello\n").unwrap();
        assert!(matches!(load_corpus(&path, 10), Err(Error::Parse { .. })));

        std::fs::write(&path, "3,x\thello\n").unwrap();
        assert!(matches!(load_corpus(&path, 10), Err(Error::Parse { .. })));

        std::fs::write(&path, "12\thello\n").unwrap();
        assert!(matches!(load_corpus(&path, 10), Err(Error::Range { .. })));
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        let mut c = corpus_of(&["first doc", "second doc"]);
        c.examples[1].labels = vec![0];
        save_corpus(&c, &path).unwrap();
        let back = load_corpus(&path, 1).unwrap();
        assert_eq!(back.examples[0].text, "first doc");
        assert_eq!(back.examples[1].labels, [0]);
    }

    #[test]
    fn encode_with_fills_every_example_and_cls_leads() {
        let mut c = corpus_of(&["aa bb", "bb cc dd"]);
        let v = build_vocab(&c, 1, 100).unwrap();
        c.encode_with(&v, 4).unwrap();
        for ex in &c.examples {
            assert_eq!(ex.token_ids.len(), 4);
            assert_eq!(ex.token_ids[0], CLS_ID);
            assert!(ex.mask[0]);
            assert_eq!(ex.token_ids.len(), ex.mask.len());
        }
    }

    #[test]
    fn batches_cover_everything_deterministically() {
        let sizes: Vec<usize> = batches(10, 4, Some(7))
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, [4, 4, 2]);

        let a: Vec<Vec<usize>> = batches(10, 3, Some(42)).unwrap().collect();
        let b: Vec<Vec<usize>> = batches(10, 3, Some(42)).unwrap().collect();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let plain: Vec<usize> = batches(5, 2, None).unwrap().flatten().collect();
        assert_eq!(plain, [0, 1, 2, 3, 4]);

        assert!(matches!(batches(5, 0, None), Err(Error::Validation { .. })));
    }
}
