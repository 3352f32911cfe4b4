//! Optimization loop: AdamW over two parameter groups (per-session adapters
//! and everything else), linear warmup, global-norm clipping, selection of
//! the best epoch by validation CER, optional weight averaging, and
//! resumable checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::ctc::{CtcBatch, CtcError, LossConfig};
use crate::dataio::{batch_order, collate, Dataset, Split};
use crate::evalreport::{micro_cer, ModelDecoder};
use crate::model::weights::{read_archive, write_archive};
use crate::model::{Binding, DecoderModel, ModelConfig, ModelError, ModelInput, ParamGroup, ParamId, ParamStore, Pass};
use crate::numcore::{Mode, RngStream, Scalar, Tape, Tensor};

const DOMAIN_INIT: u64 = 0;
const DOMAIN_SHUFFLE: u64 = 1;
const DOMAIN_AUGMENT: u64 = 2;
const DOMAIN_DROPOUT: u64 = 3;
const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: u64, loss: f64 },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub day_lr: f64,
    pub base_weight_decay: f64,
    pub day_weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub swa_enabled: bool,
    pub swa_last_k: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Keeps the session adapters at their initial (identity) values.
    pub freeze_alignment: bool,
    /// Stops after this many optimizer steps in total, mid-epoch if needed.
    pub max_steps: Option<u64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-3,
            day_lr: 5e-3,
            base_weight_decay: 0.01,
            day_weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 500,
            epochs: 50,
            batch_size: 16,
            swa_enabled: false,
            swa_last_k: 5,
            clip_norm: 1.0,
            seed: 0,
            loss: LossConfig::default(),
            freeze_alignment: false,
            max_steps: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let nonneg = [
            ("base_lr", self.base_lr),
            ("day_lr", self.day_lr),
            ("base_weight_decay", self.base_weight_decay),
            ("day_weight_decay", self.day_weight_decay),
            ("loss.lambda", self.loss.lambda),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.swa_enabled && self.swa_last_k == 0 {
            return bad("swa_last_k must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    fn group(&self, g: ParamGroup, lr: GroupLr) -> (f64, f64) {
        match g {
            ParamGroup::Day => (lr.day, self.day_weight_decay),
            ParamGroup::Base => (lr.base, self.base_weight_decay),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLr {
    pub base: f64,
    pub day: f64,
}

/// Linear warmup from 0 at step 0 to each group's target at `warmup_steps`,
/// constant afterwards.
pub fn lr_schedule(step: u64, cfg: &OptimConfig) -> GroupLr {
    let f = if cfg.warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / cfg.warmup_steps as f64).min(1.0)
    };
    GroupLr {
        base: cfg.base_lr * f,
        day: cfg.day_lr * f,
    }
}

/// Moments and step count of one parameter.
#[derive(Clone, Debug)]
pub struct Moments<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub steps: u64,
}

/// One decoupled-decay Adam update in place.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut Moments<T>,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = T::lit(1.0 - beta1.powi(t));
    let c2 = T::lit(1.0 - beta2.powi(t));
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (lr_t, decay, eps) = (T::lit(lr), T::lit(1.0 - lr * weight_decay), T::lit(eps));
    let p = param.data_mut();
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] = p[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was not finite; nothing changed.
    Skipped,
}

/// AdamW with per-parameter state. Parameters that receive no gradient in a
/// step keep their moments and step count untouched.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    state: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: usize) -> Self {
        AdamW {
            state: vec![None; params],
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments<T>> {
        self.state[id.0].as_ref()
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Tensor<T>)],
        lr: GroupLr,
        cfg: &OptimConfig,
    ) -> StepOutcome {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            log::warn!("non-finite gradient for {}; step skipped", store.get(*id).name);
            return StepOutcome::Skipped;
        }
        for (id, g) in grads {
            let group = store.get(*id).group;
            if group == ParamGroup::Day && cfg.freeze_alignment {
                continue;
            }
            let (lr, wd) = cfg.group(group, lr);
            let shape = store.value(*id).shape().to_vec();
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                steps: 0,
            });
            adamw_update(store.value_mut(*id), g, st, lr, wd, cfg.beta1, cfg.beta2, cfg.eps);
        }
        StepOutcome::Applied
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping and whether clipping fired.
pub fn clip_global_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> (f64, bool) {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.scale_in_place(s);
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

pub fn global_norm<T: Scalar>(grads: &[(ParamId, Tensor<T>)]) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Running sum of named tensors for weight averaging.
#[derive(Clone, Debug, Default)]
pub struct SwaAccumulator<T: Scalar> {
    sum: BTreeMap<String, Tensor<T>>,
    count: usize,
}

impl<T: Scalar> SwaAccumulator<T> {
    pub fn new() -> Self {
        SwaAccumulator {
            sum: BTreeMap::new(),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, state: &BTreeMap<String, Tensor<T>>) -> Result<(), TrainError> {
        if self.count == 0 {
            self.sum = state.clone();
            self.count = 1;
            return Ok(());
        }
        for (name, t) in state {
            let acc = self.sum.get_mut(name).ok_or_else(|| mismatch(name, "not present in earlier snapshots"))?;
            if acc.shape() != t.shape() {
                return Err(mismatch(
                    name,
                    &format!("shape {:?} differs from {:?}", t.shape(), acc.shape()),
                ));
            }
            acc.add_assign(t);
        }
        if state.len() != self.sum.len() {
            let missing = self.sum.keys().find(|k| !state.contains_key(*k)).expect("extra key");
            return Err(mismatch(missing, "missing from snapshot"));
        }
        self.count += 1;
        Ok(())
    }

    pub fn mean(&self) -> Option<BTreeMap<String, Tensor<T>>> {
        (self.count > 0).then(|| {
            let inv = T::lit(1.0 / self.count as f64);
            self.sum
                .iter()
                .map(|(k, t)| {
                    let mut m = t.clone();
                    if self.count > 1 {
                        m.scale_in_place(inv);
                    }
                    (k.clone(), m)
                })
                .collect()
        })
    }
}

fn mismatch(name: &str, detail: &str) -> TrainError {
    TrainError::Checkpoint {
        path: PathBuf::new(),
        detail: format!("tensor {name}: {detail}"),
    }
}

/// Element-wise mean of named tensor sets.
pub fn swa_average<T: Scalar>(snapshots: &[BTreeMap<String, Tensor<T>>]) -> Result<BTreeMap<String, Tensor<T>>, TrainError> {
    let mut acc = SwaAccumulator::new();
    for s in snapshots {
        acc.add(s)?;
    }
    acc.mean()
        .ok_or_else(|| TrainError::Config("weight averaging needs at least one snapshot".into()))
}

/// Re-estimates batch-norm running statistics with one pass over `indices`
/// using batch statistics, no dropout and eval-mode preprocessing. The
/// estimate is the cumulative mean over batches.
pub fn recompute_batch_norm<T: Scalar>(
    model: &mut DecoderModel<T>,
    data: &Dataset,
    indices: &[usize],
    augment: &AugmentConfig,
    batch_size: usize,
) -> Result<(), TrainError> {
    let momenta: Vec<f64> = model.bn_states().iter().map(|s| s.momentum).collect();
    let min_frames = model.config().patch_size;
    let mut rng = RngStream::new(0);
    let mut seen = 0usize;
    for chunk in batch_order(indices, batch_size.max(1), Mode::Eval, &mut rng) {
        let (batch, _) = collate::<T>(data, &chunk, augment, Mode::Eval, min_frames, &rng);
        if batch.is_empty() {
            continue;
        }
        let input = ModelInput {
            features: &batch.features,
            lengths: &batch.lengths,
            sessions: &batch.sessions,
        };
        let mut tape = Tape::new();
        let mut bind = Binding::new(model.params(), false);
        let out = model.forward(&mut tape, &mut bind, &input, &mut Pass::calibrate())?;
        seen += 1;
        for s in model.bn_states_mut() {
            s.momentum = 1.0 / seen as f64;
        }
        model.commit_bn(&out.bn_stats);
    }
    for (s, m) in model.bn_states_mut().iter_mut().zip(momenta) {
        s.momentum = m;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub ctc: f64,
    pub entropy_term: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: bool,
    pub lr_base: f64,
    pub lr_day: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub ctc: f64,
    pub entropy_term: f64,
    pub val_cer: Option<f64>,
    pub lr_base: f64,
    pub lr_day: f64,
    pub wall_time_s: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    seed: u64,
    /// Completed epochs.
    epoch: usize,
    /// Batches already consumed in the epoch in progress.
    cursor: usize,
    step: u64,
    val_cer: Option<f64>,
    best_val_cer: Option<f64>,
    best_epoch: Option<usize>,
    param_steps: BTreeMap<String, u64>,
    swa_count: usize,
    history: Vec<EpochRecord>,
    partial: Option<Partial>,
}

/// Epoch-in-progress running sums.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Partial {
    loss: f64,
    ctc: f64,
    entropy: f64,
    steps: u64,
    wall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_val_cer: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_completed: usize,
    pub steps: u64,
    pub swa_val_cer: Option<f64>,
}

pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const SWA_CKPT: &str = "swa.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";

/// Owns the model and optimizer state for one training run.
pub struct Trainer<'d, T: Scalar> {
    model: DecoderModel<T>,
    optim: AdamW<T>,
    cfg: OptimConfig,
    augment: AugmentConfig,
    data: &'d Dataset,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    root: RngStream,
    epoch: usize,
    cursor: usize,
    step: u64,
    partial: Partial,
    history: Vec<EpochRecord>,
    steps: Vec<StepRecord>,
    best_val_cer: Option<f64>,
    best_epoch: Option<usize>,
    best_state: Option<BTreeMap<String, Tensor<T>>>,
    swa: SwaAccumulator<T>,
    out_dir: Option<PathBuf>,
}

/// Model initialized from the run seed's init stream.
pub fn init_model<T: Scalar>(cfg: ModelConfig, seed: u64) -> Result<DecoderModel<T>, ModelError> {
    DecoderModel::new(cfg, &mut RngStream::new(seed).derive(DOMAIN_INIT))
}

impl<'d, T: Scalar> Trainer<'d, T> {
    pub fn new(
        model: DecoderModel<T>,
        data: &'d Dataset,
        augment: AugmentConfig,
        cfg: OptimConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        augment
            .validate()
            .map_err(|e| TrainError::Config(format!("augmentation: {e}")))?;
        if data.channels != model.config().channels {
            return Err(TrainError::Config(format!(
                "dataset has {} channels, model expects {}",
                data.channels,
                model.config().channels
            )));
        }
        if data.session_count() > model.config().num_sessions {
            return Err(TrainError::Config(format!(
                "dataset has {} sessions, model has {} adapters",
                data.session_count(),
                model.config().num_sessions
            )));
        }
        let n = model.params().len();
        Ok(Trainer {
            optim: AdamW::new(n),
            root: RngStream::new(cfg.seed),
            train_idx: data.split_indices(Split::Train),
            val_idx: data.split_indices(Split::Val),
            model,
            cfg,
            augment,
            data,
            epoch: 0,
            cursor: 0,
            step: 0,
            partial: Partial::default(),
            history: Vec::new(),
            steps: Vec::new(),
            best_val_cer: None,
            best_epoch: None,
            best_state: None,
            swa: SwaAccumulator::new(),
            out_dir: None,
        })
    }

    /// Writes checkpoints and history under `dir` as training proceeds.
    pub fn with_output(mut self, dir: &Path) -> Result<Self, TrainError> {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn model(&self) -> &DecoderModel<T> {
        &self.model
    }

    pub fn into_model(self) -> DecoderModel<T> {
        self.model
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.optim
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn step_records(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn best_val_cer(&self) -> Option<f64> {
        self.best_val_cer
    }

    /// Best-epoch weights, or the current weights before any epoch finished.
    pub fn best_state(&self) -> BTreeMap<String, Tensor<T>> {
        self.best_state.clone().unwrap_or_else(|| self.model.state_tensors())
    }

    fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = self.root.derive(DOMAIN_SHUFFLE).derive(epoch as u64);
        batch_order(&self.train_idx, self.cfg.batch_size, Mode::Train, &mut rng)
    }

    fn budget_left(&self) -> bool {
        self.cfg.max_steps.is_none_or(|m| self.step < m)
    }

    /// One optimizer step on `indices`. A non-finite loss is an error; a
    /// non-finite gradient skips the update.
    pub fn train_step(&mut self, indices: &[usize]) -> Result<Option<StepRecord>, TrainError> {
        let aug_rng = self.root.derive(DOMAIN_AUGMENT).derive(self.step);
        let min_frames = self.model.config().patch_size;
        let (batch, _) = collate::<T>(self.data, indices, &self.augment, Mode::Train, min_frames, &aug_rng);
        if batch.is_empty() {
            return Ok(None);
        }
        let mut drop_rng = self.root.derive(DOMAIN_DROPOUT).derive(self.step);
        let mut tape = Tape::new();
        let mut bind = Binding::new(self.model.params(), true);
        let input = ModelInput {
            features: &batch.features,
            lengths: &batch.lengths,
            sessions: &batch.sessions,
        };
        let out = self.model.forward(&mut tape, &mut bind, &input, &mut Pass::train(&mut drop_rng))?;
        if !tape.value(out.log_probs).all_finite() {
            return Err(TrainError::Diverged {
                epoch: self.epoch,
                step: self.step,
                loss: f64::NAN,
            });
        }
        let (loss, parts) = tape.ctc_objective(
            &CtcBatch {
                log_probs: out.log_probs,
                input_lengths: &out.token_lengths,
                targets: &batch.targets,
            },
            &self.cfg.loss,
        )?;
        if !parts.total.is_finite() {
            return Err(TrainError::Diverged {
                epoch: self.epoch,
                step: self.step,
                loss: parts.total,
            });
        }
        let mut grads_all = tape.backward(loss);
        let mut grads: Vec<(ParamId, Tensor<T>)> = bind
            .bound()
            .filter_map(|(id, v)| grads_all.take(v).map(|g| (id, g)))
            .collect();
        self.step += 1;
        let lr = lr_schedule(self.step, &self.cfg);
        let (grad_norm, clipped) = clip_global_norm(&mut grads, self.cfg.clip_norm);
        let outcome = self.optim.step(self.model.params_mut(), &grads, lr, &self.cfg);
        self.model.commit_bn(&out.bn_stats);
        let rec = StepRecord {
            epoch: self.epoch,
            step: self.step,
            loss: parts.total,
            ctc: parts.ctc,
            entropy_term: parts.entropy_term,
            grad_norm,
            clipped,
            skipped: outcome == StepOutcome::Skipped,
            lr_base: lr.base,
            lr_day: lr.day,
        };
        self.steps.push(rec.clone());
        Ok(Some(rec))
    }

    /// Micro CER of the current weights on `indices`.
    pub fn cer_on(&self, indices: &[usize]) -> Result<f64, TrainError> {
        let dec = ModelDecoder {
            model: &self.model,
            augment: &self.augment,
            batch_size: self.cfg.batch_size,
        };
        Ok(micro_cer(&dec, self.data, indices)?)
    }

    fn validate_epoch(&self) -> Result<Option<f64>, TrainError> {
        if self.val_idx.is_empty() {
            return Ok(None);
        }
        self.cer_on(&self.val_idx).map(Some)
    }

    fn finish_epoch(&mut self) -> Result<(), TrainError> {
        let val_cer = self.validate_epoch()?;
        let p = std::mem::take(&mut self.partial);
        let n = p.steps.max(1) as f64;
        let lr = lr_schedule(self.step, &self.cfg);
        let rec = EpochRecord {
            epoch: self.epoch,
            train_loss: p.loss / n,
            ctc: p.ctc / n,
            entropy_term: p.entropy / n,
            val_cer,
            lr_base: lr.base,
            lr_day: lr.day,
            wall_time_s: p.wall,
            steps: p.steps,
        };
        log::info!(
            "epoch {} loss {:.4} val_cer {}",
            rec.epoch,
            rec.train_loss,
            val_cer.map_or("n/a".to_string(), |c| format!("{c:.4}"))
        );
        self.history.push(rec);
        self.epoch += 1;
        self.cursor = 0;

        let improved = match (val_cer, self.best_val_cer) {
            (Some(c), Some(b)) => c < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            self.best_val_cer = val_cer;
            self.best_epoch = Some(self.epoch - 1);
            self.best_state = Some(self.model.state_tensors());
        }
        if self.cfg.swa_enabled && self.epoch + self.cfg.swa_last_k > self.cfg.epochs {
            self.swa.add(&self.model.state_tensors())?;
        }
        if let Some(dir) = self.out_dir.clone() {
            self.write_history(&dir)?;
            if improved {
                self.write_best(&dir.join(BEST_CKPT))?;
            }
            self.save_checkpoint(&dir.join(LAST_CKPT))?;
        }
        Ok(())
    }

    /// Runs until `epochs` are complete or the step budget is spent.
    pub fn run(&mut self) -> Result<TrainSummary, TrainError> {
        let result = self.run_inner();
        if let Some(dir) = self.out_dir.clone() {
            let written = self.write_history(&dir);
            if result.is_ok() {
                written?;
            }
        }
        result
    }

    fn run_inner(&mut self) -> Result<TrainSummary, TrainError> {
        if let Some(dir) = self.out_dir.clone() {
            if self.best_state.is_none() && !dir.join(BEST_CKPT).exists() {
                self.write_best(&dir.join(BEST_CKPT))?;
            }
        }
        while self.epoch < self.cfg.epochs && self.budget_left() {
            let batches = self.epoch_batches(self.epoch);
            let start = Instant::now();
            while self.cursor < batches.len() && self.budget_left() {
                let idx = batches[self.cursor].clone();
                let rec = self.train_step(&idx)?;
                self.cursor += 1;
                if let Some(r) = rec {
                    self.partial.loss += r.loss;
                    self.partial.ctc += r.ctc;
                    self.partial.entropy += r.entropy_term;
                    self.partial.steps += 1;
                }
            }
            self.partial.wall += start.elapsed().as_secs_f64();
            if self.cursor >= batches.len() {
                self.finish_epoch()?;
            } else if let Some(dir) = self.out_dir.clone() {
                self.write_history(&dir)?;
                self.save_checkpoint(&dir.join(LAST_CKPT))?;
            }
        }
        let swa_val_cer = self.finish_swa()?;
        Ok(TrainSummary {
            best_val_cer: self.best_val_cer,
            best_epoch: self.best_epoch,
            epochs_completed: self.epoch,
            steps: self.step,
            swa_val_cer,
        })
    }

    fn finish_swa(&mut self) -> Result<Option<f64>, TrainError> {
        if !self.cfg.swa_enabled || self.swa.count() == 0 || self.epoch < self.cfg.epochs {
            return Ok(None);
        }
        let mean = self.swa.mean().expect("non-empty");
        let mut averaged = self.model.clone();
        averaged.apply_state(&mean, "")?;
        recompute_batch_norm(
            &mut averaged,
            self.data,
            &self.train_idx,
            &self.augment,
            self.cfg.batch_size,
        )?;
        let dec = ModelDecoder {
            model: &averaged,
            augment: &self.augment,
            batch_size: self.cfg.batch_size,
        };
        let cer = if self.val_idx.is_empty() {
            None
        } else {
            Some(micro_cer(&dec, self.data, &self.val_idx)?)
        };
        if let Some(dir) = &self.out_dir {
            averaged.save(
                &dir.join(SWA_CKPT),
                serde_json::json!({"kind": "swa", "averaged": self.swa.count(), "val_cer": cer, "seed": self.cfg.seed}),
            )?;
        }
        Ok(cer)
    }

    fn write_best(&self, path: &Path) -> Result<(), TrainError> {
        let state = self.best_state();
        let meta = serde_json::json!({
            "kind": "best",
            "epoch": self.best_epoch,
            "val_cer": self.best_val_cer,
            "seed": self.cfg.seed,
        });
        write_archive(path, self.model.config(), &state, meta)?;
        Ok(())
    }

    fn write_history(&self, dir: &Path) -> Result<(), TrainError> {
        write_jsonl(&dir.join(HISTORY_FILE), &self.history)?;
        write_jsonl(&dir.join(STEPS_FILE), &self.steps)
    }

    /// Full resumable state: weights, optimizer moments, counters, history
    /// and the weight-averaging sum.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut tensors = self.model.state_tensors();
        let mut param_steps = BTreeMap::new();
        for (id, p) in self.model.params().iter() {
            if let Some(st) = self.optim.moments(id) {
                tensors.insert(format!("{OPTIM_PREFIX}m.{}", p.name), st.m.clone());
                tensors.insert(format!("{OPTIM_PREFIX}v.{}", p.name), st.v.clone());
                param_steps.insert(p.name.clone(), st.steps);
            }
        }
        if self.swa.count() > 0 {
            for (k, t) in &self.swa.sum {
                tensors.insert(format!("{OPTIM_PREFIX}swa.{k}"), t.clone());
            }
        }
        let meta = CheckpointMeta {
            kind: "train".into(),
            seed: self.cfg.seed,
            epoch: self.epoch,
            cursor: self.cursor,
            step: self.step,
            val_cer: self.history.last().and_then(|h| h.val_cer),
            best_val_cer: self.best_val_cer,
            best_epoch: self.best_epoch,
            param_steps,
            swa_count: self.swa.count(),
            history: self.history.clone(),
            partial: Some(self.partial.clone()),
        };
        let meta = serde_json::to_value(meta).expect("plain data");
        write_archive(path, self.model.config(), &tensors, meta)?;
        Ok(())
    }

    /// Restores a run saved by [`Trainer::save_checkpoint`]. The best-epoch
    /// weights are read from `best.ckpt` beside the checkpoint when present.
    pub fn resume(
        path: &Path,
        data: &'d Dataset,
        augment: AugmentConfig,
        cfg: OptimConfig,
    ) -> Result<Self, TrainError> {
        let bad = |detail: String| TrainError::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        let archive = read_archive::<T>(path)?;
        let meta: CheckpointMeta =
            serde_json::from_value(archive.meta.clone()).map_err(|e| bad(format!("metadata: {e}")))?;
        if meta.kind != "train" {
            return Err(bad(format!("not a training checkpoint (kind {:?})", meta.kind)));
        }
        if meta.seed != cfg.seed {
            return Err(bad(format!("saved with seed {}, resumed with {}", meta.seed, cfg.seed)));
        }
        let mut model = DecoderModel::<T>::new(archive.config.clone(), &mut RngStream::new(0))?;
        model.apply_state(&archive.tensors, OPTIM_PREFIX)?;
        let mut t = Trainer::new(model, data, augment, cfg)?;
        for (id, p) in t.model.params().iter() {
            let m = archive.tensors.get(&format!("{OPTIM_PREFIX}m.{}", p.name));
            let v = archive.tensors.get(&format!("{OPTIM_PREFIX}v.{}", p.name));
            if let (Some(m), Some(v), Some(&steps)) = (m, v, meta.param_steps.get(&p.name)) {
                t.optim.state[id.0] = Some(Moments {
                    m: m.clone(),
                    v: v.clone(),
                    steps,
                });
            }
        }
        if meta.swa_count > 0 {
            let prefix = format!("{OPTIM_PREFIX}swa.");
            t.swa.sum = archive
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|n| (n.to_string(), v.clone())))
                .collect();
            t.swa.count = meta.swa_count;
        }
        t.epoch = meta.epoch;
        t.cursor = meta.cursor;
        t.step = meta.step;
        t.partial = meta.partial.unwrap_or_default();
        t.history = meta.history;
        t.best_val_cer = meta.best_val_cer;
        t.best_epoch = meta.best_epoch;
        if let Some(dir) = path.parent() {
            let best = dir.join(BEST_CKPT);
            if meta.best_epoch.is_some() && best.exists() {
                t.best_state = Some(read_archive::<T>(&best)?.tensors);
            }
        }
        Ok(t)
    }
}

fn write_jsonl<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in rows {
        serde_json::to_writer(&mut f, r).expect("plain data");
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}
