//! Minimal pre-norm transformer encoder that records every layer's output.
//!
//! Layout conventions: a batch of B sequences of length S (position 0 is
//! [CLS]) is processed as a flat [B·S, d] matrix; attention regroups it to
//! [B·heads, S, d/heads] per layer. The full stack of hidden states
//! H⁰..Hᴺ stays on the tape so either classification head can
//! differentiate through any layer.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Mask, Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Config(msg))
        };
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive".into());
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// One transformer block's parameters.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

fn init_weight(seed: u64, name: &str, shape: Vec<usize>) -> Tensor {
    let mut rng = Rng::substream(seed, name, 0);
    Tensor::randn(shape, INIT_STD, &mut rng)
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let layers = (0..config.num_layers)
            .map(|i| {
                let w = |part: &str, shape: Vec<usize>| {
                    init_weight(seed, &format!("encoder.layer{i}.{part}"), shape)
                };
                LayerParams {
                    wq: w("wq", vec![d, d]),
                    bq: Tensor::zeros(vec![d]),
                    wk: w("wk", vec![d, d]),
                    bk: Tensor::zeros(vec![d]),
                    wv: w("wv", vec![d, d]),
                    bv: Tensor::zeros(vec![d]),
                    wo: w("wo", vec![d, d]),
                    bo: Tensor::zeros(vec![d]),
                    w1: w("w1", vec![d, config.ffn_dim]),
                    b1: Tensor::zeros(vec![config.ffn_dim]),
                    w2: w("w2", vec![config.ffn_dim, d]),
                    b2: Tensor::zeros(vec![d]),
                    ln1_gain: Tensor::full(vec![d], 1.0),
                    ln1_bias: Tensor::zeros(vec![d]),
                    ln2_gain: Tensor::full(vec![d], 1.0),
                    ln2_bias: Tensor::zeros(vec![d]),
                }
            })
            .collect();
        Ok(EncoderParams {
            config: config.clone(),
            token_emb: init_weight(seed, "encoder.token_emb", vec![config.vocab_size, d]),
            pos_emb: init_weight(seed, "encoder.pos_emb", vec![config.max_positions, d]),
            layers,
        })
    }

    /// Stable (name, tensor) listing; the checkpoint directory and the
    /// optimizer's parameter order both come from here.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("encoder.token_emb".to_owned(), &self.token_emb),
            ("encoder.pos_emb".to_owned(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (part, t) in layer_fields(l) {
                out.push((format!("encoder.layer{i}.{part}"), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("encoder.token_emb".to_owned(), &mut self.token_emb),
            ("encoder.pos_emb".to_owned(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (part, t) in layer_fields_mut(l) {
                out.push((format!("encoder.layer{i}.{part}"), t));
            }
        }
        out
    }

    /// Record every parameter on a tape. Var order mirrors
    /// [`EncoderParams::named_tensors`].
    pub fn bind(&self, tape: &Tape) -> EncoderVars {
        let token_emb = tape.leaf(self.token_emb.clone());
        let pos_emb = tape.leaf(self.pos_emb.clone());
        let layers: Vec<LayerVars> = self
            .layers
            .iter()
            .map(|l| LayerVars {
                wq: tape.leaf(l.wq.clone()),
                bq: tape.leaf(l.bq.clone()),
                wk: tape.leaf(l.wk.clone()),
                bk: tape.leaf(l.bk.clone()),
                wv: tape.leaf(l.wv.clone()),
                bv: tape.leaf(l.bv.clone()),
                wo: tape.leaf(l.wo.clone()),
                bo: tape.leaf(l.bo.clone()),
                w1: tape.leaf(l.w1.clone()),
                b1: tape.leaf(l.b1.clone()),
                w2: tape.leaf(l.w2.clone()),
                b2: tape.leaf(l.b2.clone()),
                ln1_gain: tape.leaf(l.ln1_gain.clone()),
                ln1_bias: tape.leaf(l.ln1_bias.clone()),
                ln2_gain: tape.leaf(l.ln2_gain.clone()),
                ln2_bias: tape.leaf(l.ln2_bias.clone()),
            })
            .collect();
        EncoderVars {
            token_emb,
            pos_emb,
            layers,
        }
    }
}

fn layer_fields(l: &LayerParams) -> Vec<(&'static str, &Tensor)> {
    vec![
        ("wq", &l.wq),
        ("bq", &l.bq),
        ("wk", &l.wk),
        ("bk", &l.bk),
        ("wv", &l.wv),
        ("bv", &l.bv),
        ("wo", &l.wo),
        ("bo", &l.bo),
        ("w1", &l.w1),
        ("b1", &l.b1),
        ("w2", &l.w2),
        ("b2", &l.b2),
        ("ln1_gain", &l.ln1_gain),
        ("ln1_bias", &l.ln1_bias),
        ("ln2_gain", &l.ln2_gain),
        ("ln2_bias", &l.ln2_bias),
    ]
}

fn layer_fields_mut(l: &mut LayerParams) -> Vec<(&'static str, &mut Tensor)> {
    vec![
        ("wq", &mut l.wq),
        ("bq", &mut l.bq),
        ("wk", &mut l.wk),
        ("bk", &mut l.bk),
        ("wv", &mut l.wv),
        ("bv", &mut l.bv),
        ("wo", &mut l.wo),
        ("bo", &mut l.bo),
        ("w1", &mut l.w1),
        ("b1", &mut l.b1),
        ("w2", &mut l.w2),
        ("b2", &mut l.b2),
        ("ln1_gain", &mut l.ln1_gain),
        ("ln1_bias", &mut l.ln1_bias),
        ("ln2_gain", &mut l.ln2_gain),
        ("ln2_bias", &mut l.ln2_bias),
    ]
}

#[derive(Clone)]
pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

#[derive(Clone)]
pub struct EncoderVars {
    pub token_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    /// Vars in [`EncoderParams::named_tensors`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.token_emb.clone(), self.pos_emb.clone()];
        for l in &self.layers {
            out.extend([
                l.wq.clone(),
                l.bq.clone(),
                l.wk.clone(),
                l.bk.clone(),
                l.wv.clone(),
                l.bv.clone(),
                l.wo.clone(),
                l.bo.clone(),
                l.w1.clone(),
                l.b1.clone(),
                l.w2.clone(),
                l.b2.clone(),
                l.ln1_gain.clone(),
                l.ln1_bias.clone(),
                l.ln2_gain.clone(),
                l.ln2_bias.clone(),
            ]);
        }
        out
    }
}

/// All layer outputs of one forward pass: `layers[n]` is Hⁿ as a
/// [B·S, d] var, `layers[0]` the raw embeddings.
pub struct HiddenStates {
    pub layers: Vec<Var>,
    pub mask: Mask,
    pub batch: usize,
    pub seq: usize,
}

impl HiddenStates {
    /// Hⁿ. `n = 0` is the embedding layer, `n = N` the final block.
    pub fn layer(&self, n: usize) -> Result<&Var> {
        self.layers.get(n).ok_or_else(|| Error::Range {
            op: "HiddenStates::layer",
            msg: format!(
                "layer {n} requested but the encoder has layers 0..={}",
                self.layers.len() - 1
            ),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }
}

/// H⁰: token embedding + learned absolute position embedding, for every
/// position including padding (padding is neutralized by masks downstream).
pub fn embed(
    vars: &EncoderVars,
    config: &EncoderConfig,
    token_ids: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    if token_ids.len() != batch * seq || batch == 0 || seq == 0 {
        return Err(Error::Validation {
            op: "embed",
            msg: format!(
                "expected {batch}×{seq} token ids, got {}",
                token_ids.len()
            ),
        });
    }
    if seq > config.max_positions {
        return Err(Error::Range {
            op: "embed",
            msg: format!(
                "sequence length {seq} exceeds max_positions {}",
                config.max_positions
            ),
        });
    }
    if let Some(&bad) = token_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::Range {
            op: "embed",
            msg: format!("token id {bad} outside vocabulary of size {}", config.vocab_size),
        });
    }
    let tok = vars.token_emb.gather_rows(token_ids)?;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let pos = vars.pos_emb.gather_rows(&positions)?;
    tok.add(&pos)
}

/// Sample an inverted-dropout factor: kept entries are scaled by 1/(1−p).
fn dropout_factor(shape: Vec<usize>, rate: f64, rng: &mut Rng) -> Tensor {
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

fn maybe_dropout(x: Var, rate: f64, rng: &mut Option<&mut Rng>) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => x.mul_const(&dropout_factor(x.shape(), rate, r)),
        _ => Ok(x),
    }
}

/// Run every block over H⁰, recording each layer's output.
///
/// Block structure (pre-norm): x + Drop(Attn(LN₁(x))), then
/// x + Drop(FFN(LN₂(x))) with a GELU between the two FFN matrices.
/// Attention keys at padded positions are masked out; padded query rows
/// still compute (their garbage never reaches an unmasked row).
pub fn encode_all_layers(
    vars: &EncoderVars,
    config: &EncoderConfig,
    h0: Var,
    mask: &Mask,
    batch: usize,
    seq: usize,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<HiddenStates> {
    if h0.shape() != [batch * seq, config.model_dim] {
        return Err(Error::Dimension {
            op: "encode_all_layers",
            lhs: h0.shape(),
            rhs: vec![batch * seq, config.model_dim],
        });
    }
    if mask.rows() != batch || mask.cols() != seq {
        return Err(Error::Dimension {
            op: "encode_all_layers",
            lhs: vec![mask.rows(), mask.cols()],
            rhs: vec![batch, seq],
        });
    }
    let tau = (config.head_dim() as f64).sqrt();
    let mut states = Vec::with_capacity(vars.layers.len() + 1);
    let mut x = h0;
    states.push(x.clone());

    for (n, layer) in vars.layers.iter().enumerate() {
        // attention sublayer
        let a = x.layer_norm(&layer.ln1_gain, &layer.ln1_bias, LAYER_NORM_EPS)?;
        let q = a.matmul(&layer.wq)?.add_bias(&layer.bq)?;
        let k = a.matmul(&layer.wk)?.add_bias(&layer.bk)?;
        let v = a.matmul(&layer.wv)?.add_bias(&layer.bv)?;
        let qh = q.split_heads(batch, seq, config.num_heads)?;
        let kh = k.split_heads(batch, seq, config.num_heads)?;
        let vh = v.split_heads(batch, seq, config.num_heads)?;
        let scores = qh.bmm_nt(&kh)?;
        let probs = scores.softmax_masked(mask, tau)?;
        let ctx = probs.bmm(&vh)?;
        let merged = ctx.merge_heads(batch, seq, config.num_heads)?;
        let proj = merged.matmul(&layer.wo)?.add_bias(&layer.bo)?;
        let proj = maybe_dropout(proj, config.dropout, &mut dropout_rng)?;
        x = x.add(&proj)?;

        // feed-forward sublayer
        let f = x.layer_norm(&layer.ln2_gain, &layer.ln2_bias, LAYER_NORM_EPS)?;
        let hidden = f.matmul(&layer.w1)?.add_bias(&layer.b1)?.gelu();
        let ffn = hidden.matmul(&layer.w2)?.add_bias(&layer.b2)?;
        let ffn = maybe_dropout(ffn, config.dropout, &mut dropout_rng)?;
        x = x.add(&ffn)?;

        if !x.value().all_finite() {
            return Err(Error::Numeric {
                context: format!("encoder layer {}", n + 1),
                msg: "non-finite activation".into(),
            });
        }
        states.push(x.clone());
    }

    Ok(HiddenStates {
        layers: states,
        mask: mask.clone(),
        batch,
        seq,
    })
}
