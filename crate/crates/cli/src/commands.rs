use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use neurodecode::dataio::{read_dataset, write_dataset, Dataset, Split};
use neurodecode::evalreport::{emit_report, evaluate_split, ModelDecoder, TrialDecoder};
use neurodecode::model::DecoderModel;
use neurodecode::training::{init_model, Trainer, LAST_CKPT};

use crate::config::{Preset, RunConfig};
use crate::error::Failure;

pub const THREADS_ENV: &str = "NEURODECODE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "neurodecode", version, about = "Synthetic intracortical speech decoding: data, training, evaluation")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Defaults the config file is applied on top of.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Paper)]
    pub preset: Preset,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and keep the checkpoint with the lowest validation CER.
    Train(TrainArgs),
    /// Decode a split and write the evaluation report.
    Eval(EvalArgs),
    /// Decode one trial to text.
    Decode(DecodeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub train_trials: Option<usize>,
    #[arg(long)]
    pub val_trials: Option<usize>,
    #[arg(long)]
    pub test_trials: Option<usize>,
    /// Per-frame noise level.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Per-session mixing drift.
    #[arg(long)]
    pub drift: Option<f64>,
    /// Comma-separated vocabulary of words.
    #[arg(long, value_delimiter = ',')]
    pub words: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Turn off every stochastic augmentation; smoothing stays.
    #[arg(long)]
    pub no_augment: bool,
    /// Keep the session adapters fixed at identity.
    #[arg(long)]
    pub no_align: bool,
    /// Average the last k epoch weights into `swa.ckpt`.
    #[arg(long)]
    pub swa: bool,
    /// Continue from a `last.ckpt` written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory holding the trial.
    #[arg(long)]
    pub trial: PathBuf,
    /// Which trial of the file; the first when omitted.
    #[arg(long)]
    pub trial_id: Option<String>,
    /// Also print the per-frame argmax indices.
    #[arg(long)]
    pub with_frames: bool,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: NonZeroUsize = v
        .trim()
        .parse()
        .map_err(|_| Failure::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n.get()).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let mut cfg = RunConfig::resolve(cli.preset, cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = Some(o);
    }
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Decode(a) => decode(cfg, a),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| Failure::Config("--out is required".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_dataset(path: Option<&Path>) -> Result<Dataset, Failure> {
    let path = path.ok_or_else(|| Failure::Config("--dataset is required".into()))?;
    read_dataset(path).map_err(Failure::data)
}

fn print_json(v: serde_json::Value) {
    println!("{}", serde_json::to_string(&v).expect("plain data"));
}

fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> Result<(), Failure> {
    let s = &mut cfg.synth;
    if let Some(v) = a.sessions {
        s.sessions = v;
    }
    if let Some(v) = a.train_trials {
        s.train_trials = v;
    }
    if let Some(v) = a.val_trials {
        s.val_trials = v;
    }
    if let Some(v) = a.test_trials {
        s.test_trials = v;
    }
    if let Some(v) = a.noise {
        s.noise = v;
    }
    if let Some(v) = a.drift {
        s.drift = v;
    }
    if let Some(v) = a.words {
        s.words = v;
    }
    cfg.synth.validate().map_err(Failure::data)?;
    let dir = out_dir(&cfg)?;
    let data = neurodecode::dataio::generate_synthetic(&cfg.synth, cfg.seed).map_err(Failure::data)?;
    let manifest = write_dataset(&dir, &data).map_err(Failure::data)?;
    cfg.dataset = Some(dir.clone());
    cfg.write(&dir)?;
    let count = |sp: Split| data.split_indices(sp).len();
    print_json(json!({
        "dataset": dir,
        "channels": manifest.channels,
        "sessions": manifest.sessions.len(),
        "trials": manifest.trials.len(),
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
    }));
    Ok(())
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<(), Failure> {
    if let Some(d) = a.dataset {
        cfg.dataset = Some(d);
    }
    let o = &mut cfg.optim;
    if let Some(v) = a.epochs {
        o.epochs = v;
    }
    if let Some(v) = a.batch_size {
        o.batch_size = v;
    }
    if let Some(v) = a.lr {
        o.base_lr = v;
    }
    if let Some(v) = a.warmup {
        o.warmup_steps = v;
    }
    if a.max_steps.is_some() {
        o.max_steps = a.max_steps;
    }
    if a.no_align {
        o.freeze_alignment = true;
    }
    if a.swa {
        o.swa_enabled = true;
    }
    if a.no_augment {
        cfg.augment = cfg.augment.without_augmentation();
    }
    cfg.optim.seed = cfg.seed;
    cfg.model.validate().map_err(Failure::model)?;
    cfg.augment.validate().map_err(|e| Failure::Config(e.to_string()))?;
    cfg.optim.validate().map_err(Failure::train)?;

    let dir = out_dir(&cfg)?;
    let data = load_dataset(cfg.dataset.as_deref())?;
    cfg.write(&dir)?;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::<f32>::resume(ckpt, &data, cfg.augment.clone(), cfg.optim.clone()),
        None => {
            let model = init_model::<f32>(cfg.model.clone(), cfg.seed).map_err(Failure::model)?;
            Trainer::new(model, &data, cfg.augment.clone(), cfg.optim.clone())
        }
    }
    .map_err(Failure::train)?
    .with_output(&dir)
    .map_err(Failure::train)?;
    let summary = trainer.run().map_err(Failure::train)?;
    trainer.save_checkpoint(&dir.join(LAST_CKPT)).map_err(Failure::train)?;
    print_json(json!({
        "out": dir,
        "best_val_cer": summary.best_val_cer,
        "best_epoch": summary.best_epoch,
        "epochs": summary.epochs_completed,
        "steps": summary.steps,
        "swa_val_cer": summary.swa_val_cer,
    }));
    Ok(())
}

fn load_model(path: &Path) -> Result<DecoderModel<f32>, Failure> {
    if !path.exists() {
        return Err(Failure::Checkpoint(format!("checkpoint {} does not exist", path.display())));
    }
    DecoderModel::<f32>::from_file(path)
        .map(|(m, _)| m)
        .map_err(Failure::checkpoint)
}

fn check_compatible(model: &DecoderModel<f32>, data: &Dataset) -> Result<(), Failure> {
    let c = model.config();
    if c.channels != data.channels {
        return Err(Failure::Checkpoint(format!(
            "checkpoint expects {} channels, dataset has {}",
            c.channels, data.channels
        )));
    }
    if let Some(t) = data.trials.iter().find(|t| t.session_id >= c.num_sessions) {
        return Err(Failure::Checkpoint(format!(
            "trial {} is from session {}, checkpoint has {} session adapters",
            t.trial_id, t.session_id, c.num_sessions
        )));
    }
    Ok(())
}

fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<(), Failure> {
    if let Some(d) = a.dataset {
        cfg.dataset = Some(d);
    }
    let model = load_model(&a.checkpoint)?;
    let data = load_dataset(cfg.dataset.as_deref())?;
    check_compatible(&model, &data)?;
    let dir = out_dir(&cfg)?;
    let decoder = ModelDecoder {
        model: &model,
        augment: &cfg.augment,
        batch_size: cfg.optim.batch_size,
    };
    let report = evaluate_split(&decoder, &data, a.split).map_err(Failure::model)?;
    emit_report(&report, &dir).map_err(|e| Failure::Io(e.to_string()))?;
    cfg.write(&dir)?;
    let s = &report.summary;
    print_json(json!({
        "split": report.split,
        "micro_cer": s.micro_cer,
        "macro_cer": s.macro_cer,
        "median_cer": s.median_cer,
        "iqr_cer": s.iqr_cer,
        "utterances": s.utterances,
        "out": dir,
    }));
    Ok(())
}

fn decode(cfg: RunConfig, a: DecodeArgs) -> Result<(), Failure> {
    let model = load_model(&a.checkpoint)?;
    let data = read_dataset(&a.trial).map_err(|e| Failure::Io(e.to_string()))?;
    let index = match &a.trial_id {
        Some(id) => data
            .trials
            .iter()
            .position(|t| &t.trial_id == id)
            .ok_or_else(|| Failure::Config(format!("no trial {id:?} in {}", a.trial.display())))?,
        None if data.trials.is_empty() => {
            return Err(Failure::Io(format!("{} holds no trials", a.trial.display())));
        }
        None => 0,
    };
    check_compatible(&model, &data)?;
    let trial = &data.trials[index];
    let patch = model.config().patch_size;
    if trial.frames() < patch {
        return Err(Failure::TrialTooShort(format!(
            "trial {} has {} frames; the model needs at least one patch of {patch}",
            trial.trial_id,
            trial.frames()
        )));
    }
    let decoder = ModelDecoder {
        model: &model,
        augment: &cfg.augment,
        batch_size: 1,
    };
    let out = decoder.decode(&data, &[index]).map_err(Failure::model)?;
    println!("{}", out[0].hypothesis);
    if a.with_frames {
        let frames: Vec<String> = out[0].frames.iter().map(u32::to_string).collect();
        println!("{}", frames.join(" "));
    }
    Ok(())
}
