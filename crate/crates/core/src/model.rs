//! The combined model: one shared encoder pass feeding both heads,
//! an independent-loss objective, averaged inference, and the parameter
//! grouping used for per-group learning rates.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::{Example, PAD_ID};
use crate::encoder::{self, EncoderConfig, EncoderParams, EncoderVars, LayerVars};
use crate::error::{Error, Result};
use crate::heads::{
    self, AttentionMap, GlobalHead, GlobalHeadVars, LocalHead, LocalHeadVars, PoolerVars,
};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Mask, Tape, Var};
use crate::numerics::tensor::Tensor;

// ── configuration ────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_labels: usize,
    /// Pooler output width; None disables the pooler entirely.
    pub pooler_dim: Option<usize>,
    pub pooler_tanh: bool,
    /// Attention key/query width d_a.
    pub attn_dim: usize,
    /// Value width d_v.
    pub value_dim: usize,
    /// Scorer MLP hidden width d_h.
    pub hidden_dim: usize,
    /// Local attention temperature.
    pub tau: f64,
    /// Encoder layer feeding the local head (0 = raw embeddings).
    pub n_local: usize,
}

impl ModelConfig {
    /// A compact default: widths tied to the model dim, τ = 1, local head
    /// on layer 1, no pooler.
    pub fn small(num_labels: usize, vocab_size: usize, encoder: EncoderConfig) -> Self {
        let d = encoder.model_dim;
        let n_local = encoder.num_layers.min(1);
        let mut encoder = encoder;
        encoder.vocab_size = vocab_size;
        ModelConfig {
            encoder,
            num_labels,
            pooler_dim: None,
            pooler_tanh: true,
            attn_dim: d,
            value_dim: d,
            hidden_dim: d,
            tau: 1.0,
            n_local,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_labels == 0 {
            return Err(Error::Config("num_labels must be at least 1".into()));
        }
        if self.attn_dim == 0 || self.value_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "attention, value and hidden widths must be positive".into(),
            ));
        }
        if self.pooler_dim == Some(0) {
            return Err(Error::Config("pooler width must be positive".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {}",
                self.tau
            )));
        }
        if self.n_local > self.encoder.num_layers {
            return Err(Error::Config(format!(
                "local head layer {} exceeds encoder depth {}",
                self.n_local, self.encoder.num_layers
            )));
        }
        Ok(())
    }
}

// ── model ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GlocalModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub global_head: GlobalHead,
    pub local_head: LocalHead,
}

impl GlocalModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.model_dim;
        Ok(GlocalModel {
            config: config.clone(),
            encoder: EncoderParams::init(&config.encoder, seed)?,
            global_head: GlobalHead::init(
                config.num_labels,
                d,
                config.pooler_dim.map(|p| (p, config.pooler_tanh)),
                seed,
            ),
            local_head: LocalHead::init(
                config.num_labels,
                d,
                config.attn_dim,
                config.value_dim,
                config.hidden_dim,
                config.tau,
                config.n_local,
                seed,
            )?,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.config.num_labels
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_tensors();
        out.extend(self.global_head.named_tensors());
        out.extend(self.local_head.named_tensors());
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_tensors_mut();
        out.extend(self.global_head.named_tensors_mut());
        out.extend(self.local_head.named_tensors_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &Tape) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(tape),
            global: self.global_head.bind(tape),
            local: self.local_head.bind(tape),
        }
    }
}

#[derive(Clone)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub global: GlobalHeadVars,
    pub local: LocalHeadVars,
}

impl ModelVars {
    /// Vars in [`GlocalModel::named_tensors`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = self.encoder.ordered();
        out.extend(self.global.ordered());
        out.extend(self.local.ordered());
        out
    }

    /// Rebuild the structure from a flat var list in `ordered()` layout;
    /// the model supplies the shape (layer count, pooler presence, τ).
    pub fn from_ordered(model: &GlocalModel, vars: &[Var]) -> Result<Self> {
        let n_layers = model.encoder.layers.len();
        let n_global = if model.global_head.pooler.is_some() { 3 } else { 1 };
        let want = 2 + 16 * n_layers + n_global + 9;
        if vars.len() != want {
            return Err(Error::Validation {
                op: "ModelVars::from_ordered",
                msg: format!("expected {want} vars, got {}", vars.len()),
            });
        }
        let mut it = vars.iter().cloned();
        let mut next = || it.next().expect("length checked above");
        let token_emb = next();
        let pos_emb = next();
        let layers = (0..n_layers)
            .map(|_| LayerVars {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            })
            .collect();
        let e_global = next();
        let pooler = model.global_head.pooler.as_ref().map(|p| PoolerVars {
            weight: next(),
            bias: next(),
            tanh: p.tanh,
        });
        Ok(ModelVars {
            encoder: EncoderVars {
                token_emb,
                pos_emb,
                layers,
            },
            global: GlobalHeadVars { e_global, pooler },
            local: LocalHeadVars {
                psi_k_w: next(),
                psi_k_b: next(),
                psi_v_w: next(),
                psi_v_b: next(),
                e_local: next(),
                mlp_w1: next(),
                mlp_b1: next(),
                mlp_w2: next(),
                mlp_b2: next(),
                tau: model.local_head.tau,
            },
        })
    }
}

// ── batching ─────────────────────────────────────────────────────────────

/// Flattened inputs for one batch, trimmed to the longest real row.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub token_ids: Vec<usize>,
    pub mask: Mask,
    pub batch: usize,
    pub seq: usize,
    /// Multi-hot [batch × L] targets.
    pub targets: Tensor,
}

pub fn batch_inputs(examples: &[&Example], num_labels: usize) -> Result<BatchInputs> {
    if examples.is_empty() {
        return Err(Error::Validation {
            op: "batch_inputs",
            msg: "empty batch".into(),
        });
    }
    if let Some(i) = examples.iter().position(|e| !e.is_encoded()) {
        return Err(Error::Validation {
            op: "batch_inputs",
            msg: format!("example {i} is not encoded"),
        });
    }
    let seq = examples
        .iter()
        .map(|e| e.mask.iter().filter(|&&m| m).count())
        .max()
        .expect("non-empty batch");
    let batch = examples.len();
    let mut token_ids = Vec::with_capacity(batch * seq);
    let mut mask_data = Vec::with_capacity(batch * seq);
    let mut targets = vec![0.0; batch * num_labels];
    for (b, ex) in examples.iter().enumerate() {
        for i in 0..seq {
            token_ids.push(ex.token_ids.get(i).copied().unwrap_or(PAD_ID));
            mask_data.push(ex.mask.get(i).copied().unwrap_or(false));
        }
        for &l in &ex.labels {
            if l >= num_labels {
                return Err(Error::Range {
                    op: "batch_inputs",
                    msg: format!("label {l} outside [0, {num_labels})"),
                });
            }
            targets[b * num_labels + l] = 1.0;
        }
    }
    Ok(BatchInputs {
        token_ids,
        mask: Mask::new(batch, seq, mask_data)?,
        batch,
        seq,
        targets: Tensor::new(vec![batch, num_labels], targets)?,
    })
}

// ── forward / loss ───────────────────────────────────────────────────────

/// Logits from both heads plus the local attention, still on the tape.
pub struct ForwardOutput {
    pub z_global: Var,
    pub z_local: Var,
    pub alpha: Var,
}

/// One shared encoder pass; H^N's [CLS] rows feed the global head and
/// H^(n_local) feeds the local head.
pub fn forward_on_tape(
    model: &GlocalModel,
    vars: &ModelVars,
    inputs: &BatchInputs,
    dropout_rng: Option<&mut Rng>,
) -> Result<ForwardOutput> {
    let cfg = &model.config.encoder;
    let (batch, seq) = (inputs.batch, inputs.seq);
    let h0 = encoder::embed(&vars.encoder, cfg, &inputs.token_ids, batch, seq)?;
    let hidden =
        encoder::encode_all_layers(&vars.encoder, cfg, h0, &inputs.mask, batch, seq, dropout_rng)?;
    let h_final = hidden.layer(hidden.num_layers())?;
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
    let h_cls = h_final.select_rows(&cls_rows)?;
    let z_global = heads::global_logits(&vars.global, &h_cls)?;
    let h_local = hidden.layer(model.local_head.n_local)?;
    let (z_local, alpha) = heads::local_logits(&vars.local, h_local, &inputs.mask, batch, seq)?;
    Ok(ForwardOutput {
        z_global,
        z_local,
        alpha,
    })
}

/// L_total = BCE(z_global, y) + BCE(z_local, y); the averaged probability
/// is never trained on.
pub fn total_loss(z_global: &Var, z_local: &Var, targets: &Tensor) -> Result<Var> {
    let lg = z_global.bce_with_logits(targets)?;
    let ll = z_local.bce_with_logits(targets)?;
    lg.add(&ll)
}

// ── inference ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionSource {
    Global,
    Local,
    Final,
}

impl FromStr for PredictionSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(PredictionSource::Global),
            "local" => Ok(PredictionSource::Local),
            "final" => Ok(PredictionSource::Final),
            other => Err(Error::Config(format!(
                "unknown prediction source {other:?} (expected global, local or final)"
            ))),
        }
    }
}

impl std::fmt::Display for PredictionSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictionSource::Global => "global",
            PredictionSource::Local => "local",
            PredictionSource::Final => "final",
        })
    }
}

/// Per-head and averaged probabilities for one batch.
#[derive(Clone, Debug)]
pub struct PredictionBatch {
    pub p_global: Tensor,
    pub p_local: Tensor,
    pub p_final: Tensor,
    pub attention: Option<AttentionMap>,
}

impl PredictionBatch {
    pub fn probs(&self, source: PredictionSource) -> &Tensor {
        match source {
            PredictionSource::Global => &self.p_global,
            PredictionSource::Local => &self.p_local,
            PredictionSource::Final => &self.p_final,
        }
    }
}

/// Inference forward pass (no dropout). Set `want_attention` to keep the
/// local attention map for inspection.
pub fn forward(
    model: &GlocalModel,
    examples: &[&Example],
    want_attention: bool,
) -> Result<PredictionBatch> {
    let inputs = batch_inputs(examples, model.num_labels())?;
    let tape = Tape::new();
    let vars = model.bind(&tape);
    let out = forward_on_tape(model, &vars, &inputs, None)?;
    let p_global = out.z_global.sigmoid().value();
    let p_local = out.z_local.sigmoid().value();
    let p_final = Tensor::new(
        p_global.shape().to_vec(),
        p_global
            .data()
            .iter()
            .zip(p_local.data().iter())
            .map(|(&g, &l)| 0.5 * (g + l))
            .collect(),
    )?;
    let attention = if want_attention {
        Some(AttentionMap::new(out.alpha.value(), inputs.mask.clone())?)
    } else {
        None
    };
    Ok(PredictionBatch {
        p_global,
        p_local,
        p_final,
        attention,
    })
}

/// Mean total loss of one batch (inference path, no dropout).
pub fn loss(model: &GlocalModel, examples: &[&Example]) -> Result<f64> {
    let inputs = batch_inputs(examples, model.num_labels())?;
    let tape = Tape::new();
    let vars = model.bind(&tape);
    let out = forward_on_tape(model, &vars, &inputs, None)?;
    Ok(total_loss(&out.z_global, &out.z_local, &inputs.targets)?
        .value()
        .item())
}

/// Rank the labels of each row by probability, descending, ties broken by
/// ascending label id.
pub fn topk_rows(probs: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension {
            op: "topk_rows",
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        });
    }
    let num_labels = shape[1];
    if k == 0 || k > num_labels {
        return Err(Error::Validation {
            op: "topk_rows",
            msg: format!("k = {k} outside [1, {num_labels}]"),
        });
    }
    Ok((0..shape[0])
        .map(|b| {
            let mut ids: Vec<usize> = (0..num_labels).collect();
            ids.sort_by(|&a, &c| {
                probs
                    .get2(b, c)
                    .total_cmp(&probs.get2(b, a))
                    .then(a.cmp(&c))
            });
            ids.truncate(k);
            ids
        })
        .collect())
}

pub fn predict_topk(
    model: &GlocalModel,
    examples: &[&Example],
    k: usize,
    source: PredictionSource,
) -> Result<Vec<Vec<usize>>> {
    let preds = forward(model, examples, false)?;
    topk_rows(preds.probs(source), k)
}

/// `doc_id<TAB>label:prob …` lines, labels sorted by descending
/// probability (ties by ascending id), optionally truncated to `k`.
pub fn prediction_dump(probs: &Tensor, doc_offset: usize, k: Option<usize>) -> Result<String> {
    let num_labels = probs.shape()[1];
    let ranked = topk_rows(probs, k.unwrap_or(num_labels))?;
    let mut out = String::new();
    for (b, row) in ranked.iter().enumerate() {
        write!(out, "{}", doc_offset + b).expect("string write");
        for &l in row {
            write!(out, "\t{l}:{:.6}", probs.get2(b, l)).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

// ── parameter groups ─────────────────────────────────────────────────────

/// Per-group learning rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrConfig {
    pub backbone: f64,
    pub global_pooler: f64,
    pub global_classifier: f64,
    pub local_attention: f64,
    pub local_mlp: f64,
}

impl LrConfig {
    pub fn uniform(rate: f64) -> Self {
        LrConfig {
            backbone: rate,
            global_pooler: rate,
            global_classifier: rate,
            local_attention: rate,
            local_mlp: rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("backbone", self.backbone),
            ("global_pooler", self.global_pooler),
            ("global_classifier", self.global_classifier),
            ("local_attention", self.local_attention),
            ("local_mlp", self.local_mlp),
        ] {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(Error::Config(format!(
                    "learning rate for {name} must be finite and non-negative, got {r}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: &'static str,
    pub lr: f64,
    pub tensor_names: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ParamGroups {
    pub groups: Vec<ParamGroup>,
}

impl ParamGroups {
    /// Learning rate for one named tensor.
    pub fn rate_of(&self, tensor_name: &str) -> Option<f64> {
        self.groups
            .iter()
            .find(|g| g.tensor_names.iter().any(|n| n == tensor_name))
            .map(|g| g.lr)
    }
}

/// Partition every trainable tensor into the five rate groups.
pub fn param_groups(model: &GlocalModel, rates: &LrConfig) -> Result<ParamGroups> {
    rates.validate()?;
    let mut backbone = Vec::new();
    let mut global_pooler = Vec::new();
    let mut global_classifier = Vec::new();
    let mut local_attention = Vec::new();
    let mut local_mlp = Vec::new();
    for (name, _) in model.named_tensors() {
        let bucket = if name.starts_with("encoder.") {
            &mut backbone
        } else if name.starts_with("global.pooler.") {
            &mut global_pooler
        } else if name == "global.e" {
            &mut global_classifier
        } else if name.starts_with("local.mlp.") {
            &mut local_mlp
        } else if name.starts_with("local.") {
            &mut local_attention
        } else {
            return Err(Error::Validation {
                op: "param_groups",
                msg: format!("tensor {name} fits no group"),
            });
        };
        bucket.push(name);
    }
    Ok(ParamGroups {
        groups: vec![
            ParamGroup {
                name: "backbone",
                lr: rates.backbone,
                tensor_names: backbone,
            },
            ParamGroup {
                name: "global_pooler",
                lr: rates.global_pooler,
                tensor_names: global_pooler,
            },
            ParamGroup {
                name: "global_classifier",
                lr: rates.global_classifier,
                tensor_names: global_classifier,
            },
            ParamGroup {
                name: "local_attention",
                lr: rates.local_attention,
                tensor_names: local_attention,
            },
            ParamGroup {
                name: "local_mlp",
                lr: rates.local_mlp,
                tensor_names: local_mlp,
            },
        ],
    })
}
