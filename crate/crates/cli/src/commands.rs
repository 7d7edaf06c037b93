//! One function per subcommand. Every command reads settings with the same
//! precedence — flag, then config file, then built-in default — and writes
//! nothing but the files it names, so identical invocations produce
//! byte-identical outputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Args;

use glocal_core::data::synthetic::{generate_synthetic, SyntheticSpec};
use glocal_core::data::{self, Corpus, Vocab};
use glocal_core::encoder::EncoderConfig;
use glocal_core::eval::{self, AblationOptions};
use glocal_core::model::{
    self, GlocalModel, LrConfig, ModelConfig, ModelVars, PredictionSource,
};
use glocal_core::numerics::{check_gradients, Tensor};
use glocal_core::train::{self, TrainConfig};

use crate::config::{require, resolve, RunConfig};

/// Flags shared by every subcommand.
#[derive(Args, Debug)]
pub struct CommonOpts {
    /// Sectioned `key = value` config file; flags override its values
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed; model init, shuffling and dropout all derive from it
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonOpts {
    fn file(&self) -> anyhow::Result<RunConfig> {
        match &self.config {
            Some(path) => Ok(RunConfig::load(path)?),
            None => Ok(RunConfig::default()),
        }
    }
}

/// Flags naming the corpus files and vocabulary limits.
#[derive(Args, Debug)]
pub struct DataOpts {
    /// Training split (TSV: labels, tab, text)
    #[arg(long, value_name = "PATH")]
    pub train: Option<PathBuf>,
    /// Held-out split in the same format
    #[arg(long, value_name = "PATH")]
    pub test: Option<PathBuf>,
    /// Vocabulary file (written by `train`, read by `eval`)
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    /// Size of the label space
    #[arg(long)]
    pub num_labels: Option<usize>,
    /// Token positions per document, leading marker included
    #[arg(long)]
    pub max_len: Option<usize>,
}

/// Flags overriding [model] settings.
#[derive(Args, Debug)]
pub struct ModelOpts {
    /// Attention temperature for the label-wise head
    #[arg(long)]
    pub tau: Option<f64>,
    /// Encoder layer feeding the label-wise head (0 = embeddings)
    #[arg(long)]
    pub local_layer: Option<usize>,
}

/// Flags overriding [train] settings.
#[derive(Args, Debug)]
pub struct TrainOpts {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Encoder learning rate
    #[arg(long)]
    pub lr_backbone: Option<f64>,
    /// Pooler learning rate
    #[arg(long)]
    pub lr_pooler: Option<f64>,
    /// Global classifier learning rate
    #[arg(long)]
    pub lr_global: Option<f64>,
    /// Label-attention learning rate
    #[arg(long)]
    pub lr_attention: Option<f64>,
    /// Scorer MLP learning rate
    #[arg(long)]
    pub lr_mlp: Option<f64>,
    /// Checkpoint path, refreshed after every epoch
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Training-log CSV path
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
}

/// Flags overriding [eval] settings.
#[derive(Args, Debug)]
pub struct EvalOpts {
    /// Comma-separated cutoffs, e.g. 1,3,5
    #[arg(long)]
    pub k: Option<String>,
    /// Documents per forward pass
    #[arg(long)]
    pub eval_batch: Option<usize>,
    /// Probability source: global, local or final
    #[arg(long)]
    pub source: Option<String>,
}

fn parse_usize_list(text: &str, what: &str) -> anyhow::Result<Vec<usize>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .with_context(|| format!("bad {what} entry {part:?}"))
        })
        .collect()
}

/// `A..B` (inclusive) or a comma list.
fn parse_layers(text: &str) -> anyhow::Result<Vec<usize>> {
    if let Some((a, b)) = text.split_once("..") {
        let a: usize = a.trim().parse().with_context(|| format!("bad layer range {text:?}"))?;
        let b: usize = b.trim().parse().with_context(|| format!("bad layer range {text:?}"))?;
        if a > b {
            bail!("empty layer range {text:?}");
        }
        return Ok((a..=b).collect());
    }
    parse_usize_list(text, "layer")
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Assemble the model settings for a known label space and vocabulary.
fn model_config(
    file: &RunConfig,
    opts: &ModelOpts,
    num_labels: usize,
    vocab_size: usize,
) -> anyhow::Result<ModelConfig> {
    let num_layers = resolve(None, file, "model", "num_layers", 2usize)?;
    let model_dim = resolve(None, file, "model", "model_dim", 32usize)?;
    let encoder = EncoderConfig {
        num_layers,
        model_dim,
        num_heads: resolve(None, file, "model", "num_heads", 4)?,
        ffn_dim: resolve(None, file, "model", "ffn_dim", 2 * model_dim)?,
        max_positions: resolve(None, file, "model", "max_positions", 96)?,
        vocab_size,
        dropout: resolve(None, file, "model", "dropout", 0.1)?,
    };
    let config = ModelConfig {
        encoder,
        num_labels,
        pooler_dim: file.get_optional("model", "pooler_dim")?.unwrap_or(None),
        pooler_tanh: resolve(None, file, "model", "pooler_tanh", true)?,
        attn_dim: resolve(None, file, "model", "attn_dim", model_dim)?,
        value_dim: resolve(None, file, "model", "value_dim", model_dim)?,
        hidden_dim: resolve(None, file, "model", "hidden_dim", 2 * model_dim)?,
        tau: resolve(opts.tau, file, "model", "tau", 1.0)?,
        n_local: resolve(opts.local_layer, file, "model", "n_local", num_layers)?,
    };
    config.validate()?;
    Ok(config)
}

fn train_config(
    file: &RunConfig,
    common: &CommonOpts,
    opts: &TrainOpts,
) -> anyhow::Result<TrainConfig> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        epochs: resolve(opts.epochs, file, "train", "epochs", d.epochs)?,
        batch_size: resolve(opts.batch_size, file, "train", "batch_size", d.batch_size)?,
        rates: LrConfig {
            backbone: resolve(opts.lr_backbone, file, "train", "lr_backbone", d.rates.backbone)?,
            global_pooler: resolve(
                opts.lr_pooler,
                file,
                "train",
                "lr_pooler",
                d.rates.global_pooler,
            )?,
            global_classifier: resolve(
                opts.lr_global,
                file,
                "train",
                "lr_global",
                d.rates.global_classifier,
            )?,
            local_attention: resolve(
                opts.lr_attention,
                file,
                "train",
                "lr_attention",
                d.rates.local_attention,
            )?,
            local_mlp: resolve(opts.lr_mlp, file, "train", "lr_mlp", d.rates.local_mlp)?,
        },
        beta1: resolve(None, file, "train", "beta1", d.beta1)?,
        beta2: resolve(None, file, "train", "beta2", d.beta2)?,
        epsilon: resolve(None, file, "train", "epsilon", d.epsilon)?,
        weight_decay: resolve(None, file, "train", "weight_decay", d.weight_decay)?,
        grad_clip: file.get_optional("train", "grad_clip")?.unwrap_or(d.grad_clip),
        seed: resolve(common.seed, file, "train", "seed", d.seed)?,
        eval_every: resolve(None, file, "train", "eval_every", d.eval_every)?,
        checkpoint_path: opts
            .checkpoint
            .clone()
            .or(file.get("train", "checkpoint")?),
    };
    config.validate()?;
    Ok(config)
}

fn load_split(
    flag: &Option<PathBuf>,
    file: &RunConfig,
    key: &str,
    num_labels: usize,
) -> anyhow::Result<Corpus> {
    let path: PathBuf = require(flag.clone(), file, "data", key)?;
    Ok(data::load_corpus(&path, num_labels)?)
}

fn effective_max_len(
    opts: &DataOpts,
    file: &RunConfig,
    max_positions: usize,
) -> anyhow::Result<usize> {
    resolve(opts.max_len, file, "data", "max_len", 48.min(max_positions))
        .map_err(Into::into)
}

fn eval_ks(opts: &EvalOpts, file: &RunConfig) -> anyhow::Result<Vec<usize>> {
    let text = resolve(opts.k.clone(), file, "eval", "k", "1,3,5".to_owned())?;
    parse_usize_list(&text, "k")
}

pub fn cmd_train(
    common: &CommonOpts,
    data_opts: &DataOpts,
    model_opts: &ModelOpts,
    train_opts: &TrainOpts,
) -> anyhow::Result<ExitCode> {
    let file = common.file()?;
    let num_labels = require(data_opts.num_labels, &file, "data", "num_labels")?;
    let mut train_corpus = load_split(&data_opts.train, &file, "train", num_labels)?;

    let min_freq = resolve(None, &file, "data", "min_freq", 1usize)?;
    let max_vocab = resolve(None, &file, "data", "max_vocab", 50_000usize)?;
    let vocab = data::build_vocab(&train_corpus, min_freq, max_vocab)?;

    let tcfg = train_config(&file, common, train_opts)?;
    let mcfg = model_config(&file, model_opts, num_labels, vocab.len())?;
    let max_len = effective_max_len(data_opts, &file, mcfg.encoder.max_positions)?;
    train_corpus.encode_with(&vocab, max_len)?;

    let dev = match (&data_opts.test, file.get::<PathBuf>("data", "test")?) {
        (None, None) => None,
        (flag, from_file) => {
            let path = flag.clone().or(from_file).expect("one side is set");
            let mut corpus = data::load_corpus(&path, num_labels)?;
            corpus.encode_with(&vocab, max_len)?;
            Some(corpus)
        }
    };

    // The vocabulary is part of the trained artifact: without it a
    // checkpoint cannot encode new text.
    let vocab_path = data_opts
        .vocab
        .clone()
        .or(file.get("data", "vocab")?)
        .or_else(|| {
            tcfg.checkpoint_path
                .as_ref()
                .map(|p| p.with_extension("vocab"))
        });
    if let Some(path) = &vocab_path {
        ensure_parent(path)?;
        vocab.save(path)?;
    }
    if let Some(path) = &tcfg.checkpoint_path {
        ensure_parent(path)?;
    }

    let mut model = GlocalModel::init(&mcfg, tcfg.seed)?;
    println!("examples,{}", train_corpus.len());
    println!("parameters,{}", model.num_parameters());
    let log = train::fit(&mut model, &train_corpus, dev.as_ref(), &tcfg)?;
    if let Some(loss) = log.final_loss() {
        println!("final_loss,{loss:.6}");
    }
    if let Some(report) = log.rows.iter().rev().find_map(|r| r.dev.as_ref()) {
        print!("{}", report.to_csv());
    }

    let log_path: Option<PathBuf> = train_opts.log.clone().or(file.get("train", "log")?);
    if let Some(path) = &log_path {
        write_file(path, &log.to_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_eval(
    common: &CommonOpts,
    data_opts: &DataOpts,
    eval_opts: &EvalOpts,
    checkpoint: &Option<PathBuf>,
    dump: &Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let file = common.file()?;
    let cp_path: PathBuf = require(checkpoint.clone(), &file, "train", "checkpoint")?;
    let cp = train::load_checkpoint(&cp_path)?;
    let model = cp.restore_model()?;

    let vocab_path: PathBuf = data_opts
        .vocab
        .clone()
        .or(file.get("data", "vocab")?)
        .unwrap_or_else(|| cp_path.with_extension("vocab"));
    let vocab = Vocab::load(&vocab_path)?;

    let mut corpus = load_split(&data_opts.test, &file, "test", model.num_labels())?;
    let max_len = effective_max_len(data_opts, &file, cp.config.encoder.max_positions)?;
    corpus.encode_with(&vocab, max_len)?;

    let ks = eval_ks(eval_opts, &file)?;
    let batch = resolve(eval_opts.eval_batch, &file, "eval", "batch_size", 32usize)?;
    let report = eval::evaluate(&model, &corpus, &ks, batch)?;
    print!("{}", report.to_csv());

    if let Some(path) = dump {
        let source: PredictionSource =
            resolve(eval_opts.source.clone(), &file, "eval", "source", "final".to_owned())?
                .parse()?;
        let mut text = String::new();
        for (offset, chunk) in (0..).zip(corpus.examples.chunks(batch)) {
            let refs: Vec<_> = chunk.iter().collect();
            let preds = model::forward(&model, &refs, false)?;
            text.push_str(&model::prediction_dump(
                preds.probs(source),
                offset * batch,
                None,
            )?);
        }
        write_file(path, &text)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_ablate(
    common: &CommonOpts,
    data_opts: &DataOpts,
    model_opts: &ModelOpts,
    train_opts: &TrainOpts,
    eval_opts: &EvalOpts,
    layers: &str,
    fix_global: bool,
    out_dir: &Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let file = common.file()?;
    let num_labels = require(data_opts.num_labels, &file, "data", "num_labels")?;
    let mut train_corpus = load_split(&data_opts.train, &file, "train", num_labels)?;
    let mut test_corpus = load_split(&data_opts.test, &file, "test", num_labels)?;

    let min_freq = resolve(None, &file, "data", "min_freq", 1usize)?;
    let max_vocab = resolve(None, &file, "data", "max_vocab", 50_000usize)?;
    let vocab = data::build_vocab(&train_corpus, min_freq, max_vocab)?;

    let mut tcfg = train_config(&file, common, train_opts)?;
    // each sweep run would clobber the same file
    tcfg.checkpoint_path = None;
    let mcfg = model_config(&file, model_opts, num_labels, vocab.len())?;
    let max_len = effective_max_len(data_opts, &file, mcfg.encoder.max_positions)?;
    train_corpus.encode_with(&vocab, max_len)?;
    test_corpus.encode_with(&vocab, max_len)?;

    let opts = AblationOptions {
        layers: parse_layers(layers)?,
        fix_global,
        ks: eval_ks(eval_opts, &file)?,
        eval_batch: resolve(eval_opts.eval_batch, &file, "eval", "batch_size", 32usize)?,
    };
    let rows = eval::layer_ablation(&mcfg, &tcfg, &train_corpus, &test_corpus, &opts)?;
    let csv = eval::ablation_csv(&rows);
    print!("{csv}");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_file(&dir.join("ablation.csv"), &csv)?;
        write_file(&dir.join("ablation.svg"), &eval::ablation_plot_svg(&rows))?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_gradcheck(
    common: &CommonOpts,
    model_opts: &ModelOpts,
    eps: f64,
    tol: f64,
) -> anyhow::Result<ExitCode> {
    let file = common.file()?;
    let seed = resolve(common.seed, &file, "train", "seed", 42u64)?;

    // A deliberately tiny exercise: short synthetic documents, every head
    // enabled, full loss.
    let spec = SyntheticSpec::standard(4, 5, 24, (3, 5), 0.0, seed)?;
    let (mut corpus, _) = generate_synthetic(&spec)?;
    let vocab = data::build_vocab(&corpus, 1, 64)?;
    corpus.encode_with(&vocab, 6)?;

    let encoder = EncoderConfig {
        num_layers: resolve(None, &file, "model", "num_layers", 1usize)?,
        model_dim: resolve(None, &file, "model", "model_dim", 8usize)?,
        num_heads: resolve(None, &file, "model", "num_heads", 2usize)?,
        ffn_dim: resolve(None, &file, "model", "ffn_dim", 16usize)?,
        max_positions: 8,
        vocab_size: vocab.len(),
        dropout: 0.0,
    };
    let mut mcfg = ModelConfig::small(spec.num_labels, vocab.len(), encoder);
    mcfg.tau = resolve(model_opts.tau, &file, "model", "tau", 1.0)?;
    mcfg.n_local = resolve(model_opts.local_layer, &file, "model", "n_local", 1)?;
    mcfg.validate()?;

    let model = GlocalModel::init(&mcfg, seed)?;
    let refs: Vec<_> = corpus.examples.iter().collect();
    let inputs = model::batch_inputs(&refs, mcfg.num_labels)?;
    let tensors: Vec<Tensor> = model
        .named_tensors()
        .iter()
        .map(|(_, t)| (*t).clone())
        .collect();
    let report = check_gradients(
        |_, vars| {
            let mv = ModelVars::from_ordered(&model, vars)?;
            let out = model::forward_on_tape(&model, &mv, &inputs, None)?;
            model::total_loss(&out.z_global, &out.z_local, &inputs.targets)
        },
        &tensors,
        eps,
        tol,
    )?;
    println!("tensors,{}", tensors.len());
    println!("entries,{}", report.entries_checked);
    println!("max_rel_err,{:.3e}", report.max_rel_err);
    println!("tol,{tol:.3e}");
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_synth(
    common: &CommonOpts,
    docs: usize,
    labels: usize,
    vocab_size: usize,
    len_min: usize,
    len_max: usize,
    noise: f64,
    out_dir: &Path,
) -> anyhow::Result<ExitCode> {
    let file = common.file()?;
    let seed = resolve(common.seed, &file, "train", "seed", 42u64)?;
    let spec = SyntheticSpec::standard(docs, labels, vocab_size, (len_min, len_max), noise, seed)?;
    let (train_corpus, test_corpus) = generate_synthetic(&spec)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    data::save_corpus(&train_corpus, &out_dir.join("train.tsv"))?;
    data::save_corpus(&test_corpus, &out_dir.join("test.tsv"))?;
    println!("train,{}", train_corpus.len());
    println!("test,{}", test_corpus.len());
    println!("labels,{labels}");
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_ensemble(
    inputs: &[PathBuf],
    out: &Option<PathBuf>,
    k: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let mut runs = Vec::with_capacity(inputs.len());
    for path in inputs {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        runs.push(eval::parse_predictions(&text)?);
    }
    let merged = eval::ensemble(&runs)?;
    let text = eval::format_predictions(&merged, k)?;
    match out {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
