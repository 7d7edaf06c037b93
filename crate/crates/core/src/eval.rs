//! Micro-averaged P@k, the per-layer ablation procedure, JSD between the
//! two heads' prediction distributions, and score ensembling.

use std::fmt::Write as _;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{self, GlocalModel, ModelConfig, PredictionSource};
use crate::parallel;
use crate::train::{self, TrainConfig};

pub const SOURCES: [PredictionSource; 3] = [
    PredictionSource::Global,
    PredictionSource::Local,
    PredictionSource::Final,
];

fn source_index(source: PredictionSource) -> usize {
    match source {
        PredictionSource::Global => 0,
        PredictionSource::Local => 1,
        PredictionSource::Final => 2,
    }
}

// ── precision ────────────────────────────────────────────────────────────

/// Mean over documents of |top-k ∩ truth| / k.
pub fn precision_at_k(ranked: &[Vec<usize>], truths: &[Vec<usize>], k: usize) -> Result<f64> {
    if ranked.len() != truths.len() || ranked.is_empty() {
        return Err(Error::Validation {
            op: "precision_at_k",
            msg: format!(
                "need matching, non-empty lists; got {} rankings and {} truth sets",
                ranked.len(),
                truths.len()
            ),
        });
    }
    if k == 0 {
        return Err(Error::Validation {
            op: "precision_at_k",
            msg: "k must be at least 1".into(),
        });
    }
    let mut total = 0.0;
    for (row, truth) in ranked.iter().zip(truths) {
        if row.len() < k {
            return Err(Error::Validation {
                op: "precision_at_k",
                msg: format!("ranked list has {} entries, need {k}", row.len()),
            });
        }
        let mut sorted = truth.clone();
        sorted.sort_unstable();
        let hits = row[..k]
            .iter()
            .filter(|l| sorted.binary_search(l).is_ok())
            .count();
        total += hits as f64 / k as f64;
    }
    Ok(total / ranked.len() as f64)
}

// ── distributions ────────────────────────────────────────────────────────

/// Per-label sigmoid scores normalized into a distribution over labels.
pub fn prediction_distribution(probs: &[f64]) -> Result<Vec<f64>> {
    if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Validation {
            op: "prediction_distribution",
            msg: "scores must be finite and non-negative".into(),
        });
    }
    let sum: f64 = probs.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Degenerate {
            op: "prediction_distribution",
            msg: "scores sum to zero".into(),
        });
    }
    Ok(probs.iter().map(|p| p / sum).collect())
}

/// Jensen–Shannon divergence in bits: ½KL(p‖m) + ½KL(q‖m), m = (p+q)/2.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Validation {
            op: "jsd",
            msg: format!("length mismatch: {} vs {}", p.len(), q.len()),
        });
    }
    for (name, d) in [("first", p), ("second", q)] {
        if d.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Validation {
                op: "jsd",
                msg: format!("{name} input has negative or non-finite entries"),
            });
        }
        let sum: f64 = d.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation {
                op: "jsd",
                msg: format!("{name} input sums to {sum}, not 1"),
            });
        }
    }
    // the halves accumulate separately so the result is exactly symmetric
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            kl_p += 0.5 * pi * (pi / mi).log2();
        }
        if qi > 0.0 {
            kl_q += 0.5 * qi * (qi / mi).log2();
        }
    }
    Ok((kl_p + kl_q).clamp(0.0, 1.0))
}

// ── corpus evaluation ────────────────────────────────────────────────────

/// P@k per source over a whole corpus.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub docs: usize,
    pub ks: Vec<usize>,
    /// `precision[source][i]` is P@`ks[i]`; sources ordered global, local, final.
    pub precision: [Vec<f64>; 3],
}

impl MetricsReport {
    pub fn of(&self, source: PredictionSource) -> &[f64] {
        &self.precision[source_index(source)]
    }

    /// One header row plus one value row:
    /// `docs,p{k}_global,…,p{k}_local,…,p{k}_final,…`.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("docs");
        let mut row = format!("{}", self.docs);
        for source in SOURCES {
            for (i, k) in self.ks.iter().enumerate() {
                write!(header, ",p{k}_{source}").expect("string write");
                write!(row, ",{:.6}", self.of(source)[i]).expect("string write");
            }
        }
        format!("{header}\n{row}\n")
    }
}

/// Forward the corpus in batches and score every source at each k.
/// ks beyond the label count are rejected by the ranking step.
pub fn evaluate(
    model: &GlocalModel,
    corpus: &Corpus,
    ks: &[usize],
    batch_size: usize,
) -> Result<MetricsReport> {
    if corpus.is_empty() || ks.is_empty() || batch_size == 0 {
        return Err(Error::Validation {
            op: "evaluate",
            msg: "need a non-empty corpus, at least one k and a positive batch size".into(),
        });
    }
    let max_k = *ks.iter().max().expect("non-empty ks");
    let mut ranked: [Vec<Vec<usize>>; 3] = Default::default();
    let mut truths = Vec::with_capacity(corpus.len());
    for chunk in corpus.examples.chunks(batch_size) {
        let refs: Vec<_> = chunk.iter().collect();
        let preds = model::forward(model, &refs, false)?;
        for source in SOURCES {
            ranked[source_index(source)]
                .extend(model::topk_rows(preds.probs(source), max_k)?);
        }
        truths.extend(chunk.iter().map(|ex| ex.labels.clone()));
    }
    let mut precision: [Vec<f64>; 3] = Default::default();
    for source in SOURCES {
        for &k in ks {
            let p = precision_at_k(&ranked[source_index(source)], &truths, k)?;
            precision[source_index(source)].push(p);
        }
    }
    Ok(MetricsReport {
        docs: corpus.len(),
        ks: ks.to_vec(),
        precision,
    })
}

/// Mean over documents of JSD between the normalized global and local
/// score vectors.
pub fn mean_head_jsd(model: &GlocalModel, corpus: &Corpus, batch_size: usize) -> Result<f64> {
    if corpus.is_empty() || batch_size == 0 {
        return Err(Error::Validation {
            op: "mean_head_jsd",
            msg: "need a non-empty corpus and a positive batch size".into(),
        });
    }
    let num_labels = model.num_labels();
    let mut total = 0.0;
    for chunk in corpus.examples.chunks(batch_size) {
        let refs: Vec<_> = chunk.iter().collect();
        let preds = model::forward(model, &refs, false)?;
        for b in 0..refs.len() {
            let row = |t: &crate::numerics::tensor::Tensor| -> Vec<f64> {
                (0..num_labels).map(|l| t.get2(b, l)).collect()
            };
            let p = prediction_distribution(&row(&preds.p_global))?;
            let q = prediction_distribution(&row(&preds.p_local))?;
            total += jsd(&p, &q)?;
        }
    }
    Ok(total / corpus.len() as f64)
}

// ── layer ablation ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub layer: usize,
    pub report: MetricsReport,
    pub jsd_mean: f64,
}

#[derive(Clone, Debug)]
pub struct AblationOptions {
    /// Local-head layers to sweep; 0 scores the raw embeddings.
    pub layers: Vec<usize>,
    /// Freeze the global classifier (zero learning rate) during each run.
    pub fix_global: bool,
    pub ks: Vec<usize>,
    pub eval_batch: usize,
}

/// Retrain the whole model once per requested layer (identical seed) and
/// score each run. Runs are independent and execute in parallel.
pub fn layer_ablation(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    train_corpus: &Corpus,
    test_corpus: &Corpus,
    opts: &AblationOptions,
) -> Result<Vec<AblationRow>> {
    let depth = config.encoder.num_layers;
    if let Some(&bad) = opts.layers.iter().find(|&&n| n > depth) {
        return Err(Error::Range {
            op: "layer_ablation",
            msg: format!("layer {bad} exceeds encoder depth {depth}"),
        });
    }
    if opts.layers.is_empty() {
        return Err(Error::Validation {
            op: "layer_ablation",
            msg: "no layers requested".into(),
        });
    }
    let rows = parallel::map_indexed(opts.layers.len(), |i| -> Result<AblationRow> {
        let layer = opts.layers[i];
        let mut cfg = config.clone();
        cfg.n_local = layer;
        let mut tcfg = train_cfg.clone();
        if opts.fix_global {
            tcfg.rates.global_classifier = 0.0;
        }
        let mut model = GlocalModel::init(&cfg, tcfg.seed)?;
        train::fit(&mut model, train_corpus, None, &tcfg)?;
        let report = evaluate(&model, test_corpus, &opts.ks, opts.eval_batch)?;
        let jsd_mean = mean_head_jsd(&model, test_corpus, opts.eval_batch)?;
        Ok(AblationRow {
            layer,
            report,
            jsd_mean,
        })
    });
    rows.into_iter().collect()
}

/// `layer,p{k}_global,…,p{k}_final,…,jsd` rows under one header.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut header = String::from("layer");
    for source in SOURCES {
        for k in &first.report.ks {
            write!(header, ",p{k}_{source}").expect("string write");
        }
    }
    header.push_str(",jsd");
    let mut out = header;
    out.push('\n');
    for row in rows {
        write!(out, "{}", row.layer).expect("string write");
        for source in SOURCES {
            for p in row.report.of(source) {
                write!(out, ",{p:.6}").expect("string write");
            }
        }
        writeln!(out, ",{:.6}", row.jsd_mean).expect("string write");
    }
    out
}

/// A small self-contained SVG: P@k per source against the swept layer,
/// with the mean JSD as a dashed series on the same [0,1] axis.
pub fn ablation_plot_svg(rows: &[AblationRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const ML: f64 = 50.0; // margins
    const MR: f64 = 20.0;
    const MT: f64 = 30.0;
    const MB: f64 = 40.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    if rows.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.layer as f64).collect();
    let (x_min, x_max) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let span = (x_max - x_min).max(1.0);
    let px = |x: f64| ML + (x - x_min) / span * (W - ML - MR);
    let py = |y: f64| H - MB - y.clamp(0.0, 1.0) * (H - MT - MB);

    // axes
    writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n\
         <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"#333\"/>",
        H - MB,
        W - MR,
        H - MB,
        H - MB
    )
    .expect("string write");
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{tick}</text>",
            ML - 6.0,
            py(tick) + 4.0
        )
        .expect("string write");
    }
    for row in rows {
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            px(row.layer as f64),
            H - MB + 16.0,
            row.layer
        )
        .expect("string write");
    }
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">local layer</text>",
        (ML + W - MR) / 2.0,
        H - 8.0
    )
    .expect("string write");

    let k_idx = rows[0].report.ks.len() - 1;
    let k_label = rows[0].report.ks[k_idx];
    let series: Vec<(String, &str, &str, Vec<f64>)> = SOURCES
        .iter()
        .zip(["#1f77b4", "#d62728", "#2ca02c"])
        .map(|(&s, color)| {
            (
                format!("P@{k_label} {s}"),
                color,
                "",
                rows.iter().map(|r| r.report.of(s)[k_idx]).collect(),
            )
        })
        .chain(std::iter::once((
            "JSD".to_owned(),
            "#7f7f7f",
            "stroke-dasharray=\"5,3\" ",
            rows.iter().map(|r| r.jsd_mean).collect(),
        )))
        .collect();
    for (si, (label, color, dash, ys)) in series.iter().enumerate() {
        let points: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" {dash}/>",
            points.join(" ")
        )
        .expect("string write");
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>",
            W - MR - 110.0,
            MT + 14.0 * si as f64
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    svg
}

// ── ensembling ───────────────────────────────────────────────────────────

/// Parse a prediction dump (`doc<TAB>label:prob…`) into full per-document
/// score vectors; every label must be present on every line.
pub fn parse_predictions(text: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::new();
    let mut num_labels = None;
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let doc: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Alignment(format!("line {}: bad doc id", idx + 1)))?;
        let mut probs: Vec<(usize, f64)> = Vec::new();
        for f in fields {
            let (l, p) = f
                .split_once(':')
                .ok_or_else(|| Error::Alignment(format!("line {}: bad pair {f:?}", idx + 1)))?;
            let l: usize = l
                .parse()
                .map_err(|_| Error::Alignment(format!("line {}: bad label {l:?}", idx + 1)))?;
            let p: f64 = p
                .parse()
                .map_err(|_| Error::Alignment(format!("line {}: bad prob {p:?}", idx + 1)))?;
            probs.push((l, p));
        }
        let want = *num_labels.get_or_insert(probs.len());
        if probs.len() != want {
            return Err(Error::Alignment(format!(
                "line {}: {} labels, expected {want}",
                idx + 1,
                probs.len()
            )));
        }
        let mut row = vec![f64::NAN; want];
        for (l, p) in probs {
            if l >= want || !row[l].is_nan() {
                return Err(Error::Alignment(format!(
                    "line {}: label {l} out of range or repeated",
                    idx + 1
                )));
            }
            row[l] = p;
        }
        out.push((doc, row));
    }
    if out.is_empty() {
        return Err(Error::Alignment("no predictions found".into()));
    }
    Ok(out)
}

/// Format score rows in the prediction-dump layout (`doc<TAB>label:prob…`,
/// descending probability, ties by ascending id), keeping the given doc ids.
pub fn format_predictions(rows: &[(usize, Vec<f64>)], k: Option<usize>) -> Result<String> {
    let mut out = String::new();
    for (doc, probs) in rows {
        let take = k.unwrap_or(probs.len());
        if take == 0 || take > probs.len() {
            return Err(Error::Validation {
                op: "format_predictions",
                msg: format!("k = {take} outside [1, {}]", probs.len()),
            });
        }
        let mut ids: Vec<usize> = (0..probs.len()).collect();
        ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        write!(out, "{doc}").expect("string write");
        for &l in &ids[..take] {
            write!(out, "\t{l}:{:.6}", probs[l]).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Arithmetic mean of the score vectors across runs; the runs must list
/// identical doc ids in identical order with identical label counts.
pub fn ensemble(runs: &[Vec<(usize, Vec<f64>)>]) -> Result<Vec<(usize, Vec<f64>)>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Alignment("no runs to ensemble".into()))?;
    for (r, run) in runs.iter().enumerate().skip(1) {
        if run.len() != first.len() {
            return Err(Error::Alignment(format!(
                "run {r} has {} documents, expected {}",
                run.len(),
                first.len()
            )));
        }
        for ((doc, row), (doc0, row0)) in run.iter().zip(first) {
            if doc != doc0 || row.len() != row0.len() {
                return Err(Error::Alignment(format!(
                    "run {r}: doc {doc} with {} labels does not match doc {doc0} with {}",
                    row.len(),
                    row0.len()
                )));
            }
        }
    }
    let n = runs.len() as f64;
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, (doc, row0))| {
            let mean = (0..row0.len())
                .map(|l| runs.iter().map(|run| run[i].1[l]).sum::<f64>() / n)
                .collect();
            (*doc, mean)
        })
        .collect())
}
