//! Adam with per-group learning rates, the training loop, and checkpoint
//! persistence.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{self, Corpus};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::model::{
    self, batch_inputs, param_groups, GlocalModel, LrConfig, ModelConfig, ParamGroups,
};
use crate::numerics::rng::Rng;
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;

const EVAL_BATCH: usize = 32;

// ── configuration ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rates: LrConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
    /// Global-norm gradient clip; None disables it.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Evaluate the dev corpus every this many steps; 0 means once per
    /// epoch (at the epoch's last step).
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            rates: LrConfig {
                backbone: 1e-5,
                global_pooler: 1e-4,
                global_classifier: 1e-3,
                local_attention: 2e-4,
                local_mlp: 2e-3,
            },
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            seed: 42,
            eval_every: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.rates.validate()?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

// ── optimizer ────────────────────────────────────────────────────────────

/// First/second moment buffers mirroring the canonical parameter order.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn init(model: &GlocalModel) -> Self {
        let named = model.named_tensors();
        OptimizerState {
            step: 0,
            names: named.iter().map(|(n, _)| n.clone()).collect(),
            m: named
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            v: named
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }
}

/// Scale factor that caps the global gradient norm at `clip`.
pub fn clip_scale(grads: &[Tensor], clip: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// One bias-corrected Adam update of a single tensor, with decoupled
/// weight decay folded in. `t` is the post-increment step number.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &Tensor,
    grad: &Tensor,
    m: &Tensor,
    v: &Tensor,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    t: u64,
    scale: f64,
) -> (Tensor, Tensor, Tensor) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let n = param.numel();
    let mut new_p = Vec::with_capacity(n);
    let mut new_m = Vec::with_capacity(n);
    let mut new_v = Vec::with_capacity(n);
    for i in 0..n {
        let g = grad.data()[i] * scale;
        let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
        let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let p = param.data()[i];
        new_p.push(p - lr * weight_decay * p - lr * m_hat / (v_hat.sqrt() + epsilon));
        new_m.push(mi);
        new_v.push(vi);
    }
    let shape = param.shape().to_vec();
    (
        Tensor::new(shape.clone(), new_p).expect("shape preserved"),
        Tensor::new(shape.clone(), new_m).expect("shape preserved"),
        Tensor::new(shape, new_v).expect("shape preserved"),
    )
}

/// Apply one optimizer step over every parameter; `grads` must follow the
/// canonical [`GlocalModel::named_tensors`] order. A non-finite gradient
/// aborts before any state changes.
pub fn adam_step(
    model: &mut GlocalModel,
    grads: &[Tensor],
    state: &mut OptimizerState,
    groups: &ParamGroups,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != state.names.len() {
        return Err(Error::Validation {
            op: "adam_step",
            msg: format!(
                "{} gradients for {} parameters",
                grads.len(),
                state.names.len()
            ),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::Numeric {
            context: "adam_step".into(),
            msg: format!("non-finite gradient for {}; step aborted", state.names[i]),
        });
    }
    let scale = config
        .grad_clip
        .map_or(1.0, |clip| clip_scale(grads, clip));
    state.step += 1;
    let t = state.step;
    for (i, (name, param)) in model.named_tensors_mut().into_iter().enumerate() {
        debug_assert_eq!(name, state.names[i]);
        let lr = groups.rate_of(&name).ok_or(Error::Validation {
            op: "adam_step",
            msg: format!("tensor {name} missing from parameter groups"),
        })?;
        let (p, m, v) = adam_update(
            param,
            &grads[i],
            &state.m[i],
            &state.v[i],
            lr,
            config.beta1,
            config.beta2,
            config.epsilon,
            config.weight_decay,
            t,
            scale,
        );
        *param = p;
        state.m[i] = m;
        state.v[i] = v;
    }
    Ok(())
}

// ── training log ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub loss_total: f64,
    pub loss_global: f64,
    pub loss_local: f64,
    pub dev: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// Comma-separated rows under one header; metric columns appear when
    /// any row carries a dev evaluation and stay empty elsewhere.
    pub fn to_csv(&self) -> String {
        let ks: Vec<usize> = self
            .rows
            .iter()
            .find_map(|r| r.dev.as_ref().map(|d| d.ks.clone()))
            .unwrap_or_default();
        let mut out = String::from("epoch,step,loss_total,loss_global,loss_local");
        for source in eval::SOURCES {
            for k in &ks {
                write!(out, ",p{k}_{source}").expect("string write");
            }
        }
        out.push('\n');
        for row in &self.rows {
            write!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                row.epoch, row.step, row.loss_total, row.loss_global, row.loss_local
            )
            .expect("string write");
            match &row.dev {
                Some(d) => {
                    for source in eval::SOURCES {
                        for p in d.of(source) {
                            write!(out, ",{p:.6}").expect("string write");
                        }
                    }
                }
                None => out.push_str(&",".repeat(ks.len() * 3)),
            }
            out.push('\n');
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss_total)
    }
}

// ── fit ──────────────────────────────────────────────────────────────────

/// Optimizer and stream state carried across a checkpoint boundary.
#[derive(Clone, Debug)]
pub struct ResumeState {
    pub optimizer: OptimizerState,
    pub next_epoch: usize,
    pub rng_state: Option<[u64; 4]>,
}

pub fn fit(
    model: &mut GlocalModel,
    train_corpus: &Corpus,
    dev: Option<&Corpus>,
    config: &TrainConfig,
) -> Result<TrainLog> {
    fit_resumed(model, train_corpus, dev, config, None)
}

/// The full loop: per epoch, shuffled batches → forward → both BCE terms →
/// backward → Adam. Dev P@k is attached per `eval_every`; checkpoints are
/// written after every epoch when a path is configured.
pub fn fit_resumed(
    model: &mut GlocalModel,
    train_corpus: &Corpus,
    dev: Option<&Corpus>,
    config: &TrainConfig,
    resume: Option<ResumeState>,
) -> Result<TrainLog> {
    config.validate()?;
    if train_corpus.is_empty() {
        return Err(Error::Validation {
            op: "fit",
            msg: "training corpus is empty".into(),
        });
    }
    let num_labels = model.num_labels();
    let groups = param_groups(model, &config.rates)?;
    let (mut state, start_epoch, mut dropout_rng) = match resume {
        Some(r) => (
            r.optimizer,
            r.next_epoch,
            r.rng_state
                .map_or_else(|| Rng::substream(config.seed, "dropout", 0), Rng::from_state),
        ),
        None => (
            OptimizerState::init(model),
            0,
            Rng::substream(config.seed, "dropout", 0),
        ),
    };
    let ks: Vec<usize> = [1, 3, 5]
        .into_iter()
        .filter(|&k| k <= num_labels)
        .collect();
    let dropout = model.config.encoder.dropout;
    let mut log = TrainLog::default();

    for epoch in start_epoch..config.epochs {
        let shuffle_seed = Rng::substream(config.seed, "shuffle", epoch as u64).next_u64();
        let batches: Vec<Vec<usize>> =
            data::batches(train_corpus.len(), config.batch_size, Some(shuffle_seed))?.collect();
        let epoch_steps = batches.len();
        for (bi, ids) in batches.into_iter().enumerate() {
            let refs: Vec<_> = ids.iter().map(|&i| &train_corpus.examples[i]).collect();
            let inputs = batch_inputs(&refs, num_labels)?;
            let tape = Tape::new();
            let vars = model.bind(&tape);
            let drng = if dropout > 0.0 {
                Some(&mut dropout_rng)
            } else {
                None
            };
            let abort = |what: String, state: &OptimizerState, rng: &Rng| {
                let diag = diagnostic_checkpoint(model, state, rng, epoch, config);
                Error::Numeric {
                    context: "fit".into(),
                    msg: format!(
                        "{what} at epoch {epoch}, step {}{}",
                        state.step + 1,
                        diag.map_or_else(String::new, |p| {
                            format!("; diagnostic checkpoint at {}", p.display())
                        })
                    ),
                }
            };
            let (lg, ll) = match step_losses(model, &vars, &inputs, drng) {
                Ok(v) => v,
                Err(Error::Numeric { context, msg }) => {
                    return Err(abort(format!("{context}: {msg}"), &state, &dropout_rng))
                }
                Err(e) => return Err(e),
            };
            let total = lg.add(&ll)?;
            let loss_total = total.value().item();
            if !loss_total.is_finite() {
                return Err(abort(
                    format!("non-finite loss {loss_total}"),
                    &state,
                    &dropout_rng,
                ));
            }
            let grads = tape.backward(&total)?;
            let ordered = vars.ordered();
            let grad_tensors: Vec<Tensor> =
                ordered.iter().map(|v| grads.wrt_or_zeros(v)).collect();
            adam_step(model, &grad_tensors, &mut state, &groups, config)?;

            let mut row = LogRow {
                epoch,
                step: state.step,
                loss_total,
                loss_global: lg.value().item(),
                loss_local: ll.value().item(),
                dev: None,
            };
            let due = match (dev, config.eval_every) {
                (None, _) => false,
                (Some(_), 0) => bi + 1 == epoch_steps,
                (Some(_), every) => state.step % every as u64 == 0,
            };
            if due {
                let dev_corpus = dev.expect("due implies dev present");
                row.dev = Some(eval::evaluate(model, dev_corpus, &ks, EVAL_BATCH)?);
            }
            log.rows.push(row);
        }
        if let Some(path) = &config.checkpoint_path {
            let cp = Checkpoint::capture(
                model,
                Some(&state),
                Some(dropout_rng.state()),
                epoch + 1,
            );
            save_checkpoint(path, &cp)?;
        }
    }
    Ok(log)
}

fn step_losses(
    model: &GlocalModel,
    vars: &model::ModelVars,
    inputs: &model::BatchInputs,
    dropout_rng: Option<&mut Rng>,
) -> Result<(crate::numerics::tape::Var, crate::numerics::tape::Var)> {
    let out = model::forward_on_tape(model, vars, inputs, dropout_rng)?;
    let lg = out.z_global.bce_with_logits(&inputs.targets)?;
    let ll = out.z_local.bce_with_logits(&inputs.targets)?;
    Ok((lg, ll))
}

fn diagnostic_checkpoint(
    model: &GlocalModel,
    state: &OptimizerState,
    rng: &Rng,
    epoch: usize,
    config: &TrainConfig,
) -> Option<PathBuf> {
    let base = config.checkpoint_path.as_ref()?;
    let mut name = base.as_os_str().to_owned();
    name.push(".diverged");
    let path = PathBuf::from(name);
    let cp = Checkpoint::capture(model, Some(state), Some(rng.state()), epoch);
    save_checkpoint(&path, &cp).ok()?;
    Some(path)
}

// ── checkpoints ──────────────────────────────────────────────────────────

const MAGIC: &[u8; 8] = b"GLXCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a model (and optionally resume training).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub config: ModelConfig,
    /// Parameters in canonical order.
    pub tensors: Vec<(String, Tensor)>,
    pub adam_step: Option<u64>,
    /// First/second moments keyed by parameter name, canonical order.
    pub moments: Option<(Vec<(String, Tensor)>, Vec<(String, Tensor)>)>,
    pub rng_state: Option<[u64; 4]>,
}

impl Checkpoint {
    pub fn capture(
        model: &GlocalModel,
        optimizer: Option<&OptimizerState>,
        rng_state: Option<[u64; 4]>,
        epoch: usize,
    ) -> Checkpoint {
        let tensors = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch,
            config: model.config.clone(),
            tensors,
            adam_step: optimizer.map(|s| s.step),
            moments: optimizer.map(|s| {
                (
                    s.names.iter().cloned().zip(s.m.iter().cloned()).collect(),
                    s.names.iter().cloned().zip(s.v.iter().cloned()).collect(),
                )
            }),
            rng_state,
        }
    }

    /// Fresh model with every parameter overwritten from the checkpoint.
    pub fn restore_model(&self) -> Result<GlocalModel> {
        let mut model = GlocalModel::init(&self.config, 0)?;
        let mut stored: std::collections::HashMap<&str, &Tensor> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        for (name, param) in model.named_tensors_mut() {
            let t = stored.remove(name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor {name}"))
            })?;
            if t.shape() != param.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    param.shape()
                )));
            }
            *param = t.clone();
        }
        if let Some((name, _)) = stored.into_iter().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        Ok(model)
    }

    /// Optimizer + stream state for [`fit_resumed`], validated against the
    /// model's canonical parameter list.
    pub fn resume_state(&self, model: &GlocalModel) -> Result<ResumeState> {
        let (step, (m_named, v_named)) = match (self.adam_step, &self.moments) {
            (Some(s), Some(mv)) => (s, mv),
            _ => {
                return Err(Error::Checkpoint(
                    "checkpoint carries no optimizer state".into(),
                ))
            }
        };
        let names: Vec<String> = model.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        let pick = |list: &[(String, Tensor)], kind: &str| -> Result<Vec<Tensor>> {
            names
                .iter()
                .map(|n| {
                    list.iter()
                        .find(|(ln, _)| ln == n)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| {
                            Error::Checkpoint(format!("missing {kind} moment for {n}"))
                        })
                })
                .collect()
        };
        Ok(ResumeState {
            optimizer: OptimizerState {
                step,
                m: pick(m_named, "first")?,
                v: pick(v_named, "second")?,
                names,
            },
            next_epoch: self.epoch,
            rng_state: self.rng_state,
        })
    }
}

fn format_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn config_text(c: &ModelConfig) -> String {
    let e = &c.encoder;
    let pooler = c
        .pooler_dim
        .map_or_else(|| "none".to_owned(), |d| d.to_string());
    format!(
        "num_layers={}\nmodel_dim={}\nnum_heads={}\nffn_dim={}\nmax_positions={}\n\
         vocab_size={}\ndropout={}\nnum_labels={}\npooler_dim={pooler}\npooler_tanh={}\n\
         attn_dim={}\nvalue_dim={}\nhidden_dim={}\ntau={}\nn_local={}\n",
        e.num_layers,
        e.model_dim,
        e.num_heads,
        e.ffn_dim,
        e.max_positions,
        e.vocab_size,
        e.dropout,
        c.num_labels,
        c.pooler_tanh,
        c.attn_dim,
        c.value_dim,
        c.hidden_dim,
        c.tau,
        c.n_local
    )
}

fn parse_config(lines: &[(String, String)]) -> Result<ModelConfig> {
    let get = |key: &str| -> Result<&str> {
        lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("config key {key} missing")))
    };
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for {key}: {v:?}")))
    }
    let pooler_dim = match get("pooler_dim")? {
        "none" => None,
        v => Some(num::<usize>("pooler_dim", v)?),
    };
    Ok(ModelConfig {
        encoder: EncoderConfig {
            num_layers: num("num_layers", get("num_layers")?)?,
            model_dim: num("model_dim", get("model_dim")?)?,
            num_heads: num("num_heads", get("num_heads")?)?,
            ffn_dim: num("ffn_dim", get("ffn_dim")?)?,
            max_positions: num("max_positions", get("max_positions")?)?,
            vocab_size: num("vocab_size", get("vocab_size")?)?,
            dropout: num("dropout", get("dropout")?)?,
        },
        num_labels: num("num_labels", get("num_labels")?)?,
        pooler_dim,
        pooler_tanh: num("pooler_tanh", get("pooler_tanh")?)?,
        attn_dim: num("attn_dim", get("attn_dim")?)?,
        value_dim: num("value_dim", get("value_dim")?)?,
        hidden_dim: num("hidden_dim", get("hidden_dim")?)?,
        tau: num("tau", get("tau")?)?,
        n_local: num("n_local", get("n_local")?)?,
    })
}

/// Layout: 8-byte magic, little-endian u64 header length, UTF-8 header
/// (preamble, `[config]`, `[tensors]` directory with byte offsets), raw
/// little-endian f64 payload, trailing CRC32 over all preceding bytes.
pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let mut directory: Vec<(String, &Tensor)> = cp
        .tensors
        .iter()
        .map(|(n, t)| (n.clone(), t))
        .collect();
    if let Some((m, v)) = &cp.moments {
        directory.extend(m.iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
        directory.extend(v.iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
    }

    let mut header = format!("version={}\nepoch={}\n", cp.version, cp.epoch);
    match cp.adam_step {
        Some(s) => writeln!(header, "adam_step={s}").expect("string write"),
        None => header.push_str("adam_step=none\n"),
    }
    match cp.rng_state {
        Some([a, b, c, d]) => {
            writeln!(header, "rng={a},{b},{c},{d}").expect("string write")
        }
        None => header.push_str("rng=none\n"),
    }
    header.push_str("[config]\n");
    header.push_str(&config_text(&cp.config));
    header.push_str("[tensors]\n");
    let mut offset = 0usize;
    for (name, t) in &directory {
        writeln!(header, "{name}\t{}\t{offset}", format_shape(t.shape()))
            .expect("string write");
        offset += t.numel() * 8;
    }

    let mut bytes = Vec::with_capacity(8 + 8 + header.len() + offset + 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for (_, t) in &directory {
        for x in t.data().iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&bytes);
    bytes.extend_from_slice(&hasher.finalize().to_le_bytes());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 + 8 + 4 {
        return Err(Error::Checkpoint(format!(
            "file too short ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    let want = u32::from_le_bytes(crc_bytes.try_into().expect("split of 4"));
    if hasher.finalize() != want {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let header_len =
        u64::from_le_bytes(body[8..16].try_into().expect("slice of 8")) as usize;
    if 16 + header_len > body.len() {
        return Err(Error::Checkpoint(format!(
            "header length {header_len} exceeds file size"
        )));
    }
    let header = std::str::from_utf8(&body[16..16 + header_len])
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let payload = &body[16 + header_len..];

    // split the header into preamble / config / directory sections
    let mut section = "";
    let mut preamble: Vec<(String, String)> = Vec::new();
    let mut config_lines: Vec<(String, String)> = Vec::new();
    let mut dir_lines: Vec<&str> = Vec::new();
    for line in header.lines() {
        match line {
            "" => {}
            "[config]" | "[tensors]" => section = line,
            _ => match section {
                "[tensors]" => dir_lines.push(line),
                other => {
                    let (k, v) = line.split_once('=').ok_or_else(|| {
                        Error::Checkpoint(format!("malformed header line {line:?}"))
                    })?;
                    if other == "[config]" {
                        config_lines.push((k.to_owned(), v.to_owned()));
                    } else {
                        preamble.push((k.to_owned(), v.to_owned()));
                    }
                }
            },
        }
    }
    let lookup = |key: &str| -> Result<&str> {
        preamble
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("header key {key} missing")))
    };
    let version: u32 = lookup("version")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let epoch: usize = lookup("epoch")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad epoch".into()))?;
    let adam_step = match lookup("adam_step")? {
        "none" => None,
        v => Some(
            v.parse::<u64>()
                .map_err(|_| Error::Checkpoint("bad adam_step".into()))?,
        ),
    };
    let rng_state = match lookup("rng")? {
        "none" => None,
        v => {
            let parts: Vec<u64> = v
                .split(',')
                .map(|p| p.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Checkpoint("bad rng state".into()))?;
            let arr: [u64; 4] = parts
                .try_into()
                .map_err(|_| Error::Checkpoint("rng state needs 4 words".into()))?;
            Some(arr)
        }
    };
    let config = parse_config(&config_lines)?;

    let mut tensors = Vec::new();
    let mut m_named = Vec::new();
    let mut v_named = Vec::new();
    for line in dir_lines {
        let mut fields = line.split('\t');
        let (name, shape_s, off_s) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "malformed directory line {line:?}"
                )))
            }
        };
        let shape: Vec<usize> = shape_s
            .split(',')
            .map(|d| d.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad shape for {name}")))?;
        let offset: usize = off_s
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset for {name}")))?;
        let numel: usize = shape.iter().product();
        let end = offset + numel * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} extends past the payload"
            )));
        }
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        if let Some(rest) = name.strip_prefix("adam.m.") {
            m_named.push((rest.to_owned(), tensor));
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v_named.push((rest.to_owned(), tensor));
        } else {
            tensors.push((name.to_owned(), tensor));
        }
    }
    let moments = if m_named.is_empty() && v_named.is_empty() {
        None
    } else {
        Some((m_named, v_named))
    };
    Ok(Checkpoint {
        version,
        epoch,
        config,
        tensors,
        adam_step,
        moments,
        rng_state,
    })
}
