//! `comfe`: synthetic data, training, evaluation and explanations from the
//! command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use comfe_core::checkpoint;
use comfe_core::config::parse_pairs;
use comfe_core::data::{masks_from_text, masks_to_text, read_embeddings, write_embeddings};
use comfe_core::infer::{explain, extract_exemplars, predict, write_explanation};
use comfe_core::synth::{generate, nearest_mean_oracle, SyntheticSpec};
use comfe_core::train::{resume, train, EvalSet, TrainState};
use comfe_core::{evaluate, Dataset, Masks, ModelConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "comfe", version, about = "Interpretable prototype classification head over frozen patch embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/eval dataset with ground-truth masks.
    Synth(SynthArgs),
    /// Train from a config file and an embedding file, writing a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Predict the label of one image.
    Predict(PredictArgs),
    /// Export the explanation of one image into a directory.
    Explain(ExplainArgs),
    /// List the training-set image prototypes closest to each class prototype.
    Exemplars(ExemplarArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// key = value generator settings; omitted keys keep their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for train.cfeb, eval.cfeb and the mask files.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value training settings; classes and dim default to the data's.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Held-out embeddings scored after every epoch.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Step and epoch log; defaults to standard error.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Ground-truth patch masks enabling the patch assignment rates.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: usize,
    /// Report no class when every foreground score is below this.
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f32>,
    /// Pixels per patch in the exported images.
    #[arg(long, default_value_t = 16)]
    scale: usize,
}

#[derive(Args)]
struct ExemplarArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training embeddings.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Write the index here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A bad argument value that clap cannot catch on its own.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<comfe_core::Error>() {
        Some(e) if e.is_numeric() => 3,
        Some(comfe_core::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Explain(a) => run_explain(a),
        Command::Exemplars(a) => run_exemplars(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path)
        .map_err(comfe_core::Error::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    read_embeddings(path).with_context(|| format!("reading {}", path.display()))
}

fn load_state(path: &Path) -> anyhow::Result<TrainState> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn image<'a>(ds: &'a Dataset, index: usize) -> anyhow::Result<&'a comfe_core::Image> {
    ds.images
        .get(index)
        .ok_or_else(|| usage(format!("index {index} out of range for {} images", ds.len())))
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticSpec::from_text(&read_text(p)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let data = generate(&spec)?;
    fs::create_dir_all(&a.out).map_err(comfe_core::Error::from)?;
    write_embeddings(&data.train, a.out.join("train.cfeb"))?;
    write_embeddings(&data.eval, a.out.join("eval.cfeb"))?;
    fs::write(a.out.join("train_masks.txt"), masks_to_text(&data.train_masks)).map_err(comfe_core::Error::from)?;
    fs::write(a.out.join("eval_masks.txt"), masks_to_text(&data.eval_masks)).map_err(comfe_core::Error::from)?;
    fs::write(a.out.join("spec.txt"), spec.to_text()).map_err(comfe_core::Error::from)?;
    let oracle = nearest_mean_oracle(&data.eval, &data.eval_masks, &data.class_means)?;
    println!("train_images = {}", data.train.len());
    println!("eval_images = {}", data.eval.len());
    println!("oracle_top1 = {oracle}");
    Ok(())
}

fn build_config(a: &TrainArgs, ds: &Dataset) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::new(ModelConfig::new(ds.label_space, ds.dim));
    if let Some(p) = &a.config {
        cfg.apply_pairs(&parse_pairs(&read_text(p)?)?)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let ds = load_data(&a.data)?;
    let eval_ds = a.eval.as_deref().map(load_data).transpose()?;
    let eval = eval_ds.as_ref().map(|d| EvalSet { data: d, masks: None });
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(comfe_core::Error::from)?)),
        None => Box::new(io::stderr()),
    };
    let state = match &a.resume {
        Some(p) => {
            let mut state = load_state(p)?;
            if let Some(e) = a.epochs {
                state.config.epochs = e;
            }
            if let Some(t) = a.threads {
                state.config.threads = t;
            }
            resume(state, &ds, eval, log.as_mut())?
        }
        None => train(&ds, &build_config(&a, &ds)?, eval, log.as_mut())?,
    };
    log.flush().map_err(comfe_core::Error::from)?;
    checkpoint::save(&state, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(m) = state.metrics.last() {
        println!("{}", m.to_line());
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> anyhow::Result<()> {
    let state = load_state(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    let masks: Option<Masks> = match &a.masks {
        Some(p) => Some(masks_from_text(&read_text(p)?, ds.n_z)?),
        None => None,
    };
    if a.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let report = evaluate(&state.model, &ds, masks.as_ref(), a.threads)?;
    print!("{}", report.to_text());
    Ok(())
}

fn run_predict(a: PredictArgs) -> anyhow::Result<()> {
    let state = load_state(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    let img = image(&ds, a.index)?;
    let (p, scores) = predict(&state.model, &img.views[0], a.threshold)?;
    println!("predicted = {p}");
    println!("label = {}", img.label);
    for (l, s) in scores.iter().enumerate() {
        println!("score_{l} = {s}");
    }
    Ok(())
}

fn run_explain(a: ExplainArgs) -> anyhow::Result<()> {
    if a.scale == 0 {
        return Err(usage("--scale must be at least 1"));
    }
    let state = load_state(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    let img = image(&ds, a.index)?;
    let e = explain(&state.model, &img.views[0], ds.grid, a.threshold)?;
    for p in write_explanation(&e, &a.out, a.scale)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run_exemplars(a: ExemplarArgs) -> anyhow::Result<()> {
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let state = load_state(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    let index = extract_exemplars(&state.model, ds.images.iter().map(|i| &i.views[0]), a.k)?;
    match &a.out {
        Some(p) => fs::write(p, index.to_text()).map_err(comfe_core::Error::from)?,
        None => print!("{}", index.to_text()),
    }
    Ok(())
}
