//! Feature-space augmentations and the Gaussian smoothing shared by training
//! and evaluation.
//!
//! Each operation acts on one trial stored as a `[L, C]` tensor holding its
//! valid frames only. [`apply_pipeline`] runs them over a padded batch with a
//! per-trial random substream, so results do not depend on thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numcore::{Mode, RngStream, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentFlags {
    pub white_noise: bool,
    pub offset: bool,
    pub random_walk: bool,
    pub cutoff: bool,
    pub warp: bool,
    pub mask: bool,
    pub channel_dropout: bool,
    pub smoothing: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            white_noise: true,
            offset: true,
            random_walk: true,
            cutoff: true,
            warp: true,
            mask: true,
            channel_dropout: true,
            smoothing: true,
        }
    }
}

impl AugmentFlags {
    /// Every stochastic augmentation off; smoothing kept.
    pub fn smoothing_only() -> Self {
        AugmentFlags {
            white_noise: false,
            offset: false,
            random_walk: false,
            cutoff: false,
            warp: false,
            mask: false,
            channel_dropout: false,
            smoothing: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub sigma_white: f64,
    pub sigma_offset: f64,
    /// Increment scale of the random walk. No reference value exists, so the
    /// walk is off unless set.
    pub sigma_walk: f64,
    pub max_cut: usize,
    pub warp_alpha: f64,
    pub n_masks: usize,
    pub mask_len: usize,
    pub p_drop: f64,
    pub smooth_sigma: f64,
    pub smooth_support: usize,
    pub enable: AugmentFlags,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            sigma_white: 1.0,
            sigma_offset: 0.2,
            sigma_walk: 0.0,
            max_cut: 3,
            warp_alpha: 0.10,
            n_masks: 2,
            mask_len: 20,
            p_drop: 0.05,
            smooth_sigma: 2.0,
            smooth_support: 100,
            enable: AugmentFlags::default(),
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("invalid augmentation config: {0}")]
pub struct AugmentConfigError(pub String);

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentConfigError> {
        let err = |m: &str| Err(AugmentConfigError(m.to_string()));
        for (name, v) in [
            ("sigma_white", self.sigma_white),
            ("sigma_offset", self.sigma_offset),
            ("sigma_walk", self.sigma_walk),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AugmentConfigError(format!("{name} must be a finite value >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return err("p_drop must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.warp_alpha) {
            return err("warp_alpha must lie in [0, 1)");
        }
        if !(self.smooth_sigma > 0.0 && self.smooth_sigma.is_finite()) || self.smooth_support == 0 {
            return err("smoothing needs sigma > 0 and a support of at least one tap");
        }
        Ok(())
    }

    /// The "without augmentation" arm: only smoothing remains.
    pub fn without_augmentation(&self) -> Self {
        AugmentConfig {
            enable: AugmentFlags {
                smoothing: self.enable.smoothing,
                ..AugmentFlags::smoothing_only()
            },
            ..self.clone()
        }
    }
}

/// What the pipeline did to one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AppliedOp {
    WhiteNoise,
    Offset,
    RandomWalk,
    Cutoff { frames: usize },
    Warp { factor: f64, length: usize },
    Mask { spans: Vec<(usize, usize)> },
    ChannelDropout { dropped: usize },
    Smooth,
    Skipped { name: String, reason: String },
}

impl AppliedOp {
    pub fn is_stochastic(&self) -> bool {
        !matches!(self, AppliedOp::Smooth | AppliedOp::Skipped { .. })
    }
}

fn dims<T: Scalar>(x: &Tensor<T>) -> (usize, usize) {
    match x.shape() {
        [l, c] => (*l, *c),
        s => panic!("trial tensors are [L, C], got {s:?}"),
    }
}

pub fn white_noise<T: Scalar>(x: &mut Tensor<T>, sigma: f64, rng: &mut RngStream) {
    if sigma == 0.0 {
        return;
    }
    for v in x.data_mut() {
        *v += T::lit(sigma * rng.normal());
    }
}

/// Adds one Gaussian draw per channel to every frame of that channel.
pub fn constant_offset<T: Scalar>(x: &mut Tensor<T>, sigma: f64, rng: &mut RngStream) {
    if sigma == 0.0 {
        return;
    }
    let (_, c) = dims(x);
    let delta: Vec<T> = (0..c).map(|_| T::lit(sigma * rng.normal())).collect();
    for row in x.data_mut().chunks_mut(c) {
        for (v, &d) in row.iter_mut().zip(&delta) {
            *v += d;
        }
    }
}

/// Adds an independent Gaussian random walk per channel; frame `t` (0-based)
/// receives the sum of `t + 1` increments.
pub fn random_walk_noise<T: Scalar>(x: &mut Tensor<T>, sigma: f64, rng: &mut RngStream) {
    if sigma == 0.0 {
        return;
    }
    let (_, c) = dims(x);
    let mut walk = vec![0.0f64; c];
    for row in x.data_mut().chunks_mut(c) {
        for (v, w) in row.iter_mut().zip(walk.iter_mut()) {
            *w += sigma * rng.normal();
            *v += T::lit(*w);
        }
    }
}

/// Drops `k ~ U{0..max_cut}` leading frames. `None` (nothing changed) when
/// the trial could fall below `min_frames`.
pub fn temporal_cutoff<T: Scalar>(
    x: &mut Tensor<T>,
    max_cut: usize,
    min_frames: usize,
    rng: &mut RngStream,
) -> Option<usize> {
    let (l, c) = dims(x);
    if l < max_cut + min_frames {
        return None;
    }
    let k = rng.int_inclusive(0, max_cut);
    if k > 0 {
        *x = Tensor::from_vec(&[l - k, c], x.data()[k * c..].to_vec()).expect("shape");
    }
    Some(k)
}

/// Resamples the trial to `round(factor · L)` frames by linear interpolation
/// with both endpoints pinned.
pub fn warp_by<T: Scalar>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let (l, c) = dims(x);
    let n = ((factor * l as f64).round() as usize).max(1);
    if n == l {
        return x.clone();
    }
    let src = x.data();
    let mut out = Vec::with_capacity(n * c);
    for j in 0..n {
        let pos = if n == 1 { 0.0 } else { (j * (l - 1)) as f64 / (n - 1) as f64 };
        let i = (pos.floor() as usize).min(l - 1);
        let frac = T::lit(pos - i as f64);
        let next = (i + 1).min(l - 1);
        for ch in 0..c {
            let a = src[i * c + ch];
            let b = src[next * c + ch];
            out.push(a + (b - a) * frac);
        }
    }
    Tensor::from_vec(&[n, c], out).expect("shape")
}

/// Warp with `w ~ U(1 − α, 1 + α)`. `None` when the result would be shorter
/// than `min_frames`.
pub fn time_warp<T: Scalar>(
    x: &mut Tensor<T>,
    alpha: f64,
    min_frames: usize,
    rng: &mut RngStream,
) -> Option<(f64, usize)> {
    if alpha == 0.0 {
        return Some((1.0, dims(x).0));
    }
    let w = rng.uniform_range(1.0 - alpha, 1.0 + alpha);
    let n = (w * dims(x).0 as f64).round() as usize;
    if n < min_frames {
        return None;
    }
    *x = warp_by(x, w);
    Some((w, n))
}

/// Zeroes `n_masks` spans of `U{1..mask_len}` frames across all channels,
/// each placed uniformly inside the trial. Returns `(start, len)` per mask.
pub fn time_mask<T: Scalar>(
    x: &mut Tensor<T>,
    n_masks: usize,
    mask_len: usize,
    rng: &mut RngStream,
) -> Vec<(usize, usize)> {
    let (l, c) = dims(x);
    if mask_len == 0 || l == 0 {
        return Vec::new();
    }
    let mut spans = Vec::with_capacity(n_masks);
    for _ in 0..n_masks {
        let len = rng.int_inclusive(1, mask_len).min(l);
        let start = rng.int_inclusive(0, l - len);
        x.data_mut()[start * c..(start + len) * c].fill(T::zero());
        spans.push((start, len));
    }
    spans
}

/// Zeroes each channel for the whole trial with probability `p`. Survivors
/// are not rescaled. Returns the number of dropped channels.
pub fn channel_dropout<T: Scalar>(x: &mut Tensor<T>, p: f64, rng: &mut RngStream) -> usize {
    if p == 0.0 {
        return 0;
    }
    let (_, c) = dims(x);
    let keep: Vec<bool> = (0..c).map(|_| !rng.bernoulli(p)).collect();
    for row in x.data_mut().chunks_mut(c) {
        for (v, &k) in row.iter_mut().zip(&keep) {
            if !k {
                *v = T::zero();
            }
        }
    }
    keep.iter().filter(|&&k| !k).count()
}

/// Normalized Gaussian taps indexed `0..support`, centered at `(support − 1)/2`.
pub fn gaussian_kernel(sigma: f64, support: usize) -> Vec<f64> {
    let center = (support as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..support)
        .map(|j| (-(j as f64 - center).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Temporal convolution of every channel with the Gaussian kernel, zero
/// padded ("same" length, `support / 2` frames of left padding).
pub fn gaussian_smooth<T: Scalar>(x: &Tensor<T>, sigma: f64, support: usize) -> Tensor<T> {
    let (l, c) = dims(x);
    let kernel: Vec<T> = gaussian_kernel(sigma, support).into_iter().map(T::lit).collect();
    let left = crate::numcore::same_padding(support).0 as isize;
    let src = x.data();
    let mut out = vec![T::zero(); l * c];
    for t in 0..l {
        let dst = &mut out[t * c..(t + 1) * c];
        let lo = (left - t as isize).max(0) as usize;
        let hi = (l as isize - t as isize + left).min(support as isize).max(0) as usize;
        for (j, &k) in kernel.iter().enumerate().take(hi).skip(lo) {
            let s = (t as isize + j as isize - left) as usize;
            for (o, &v) in dst.iter_mut().zip(&src[s * c..(s + 1) * c]) {
                *o += v * k;
            }
        }
    }
    Tensor::from_vec(&[l, c], out).expect("shape")
}

/// Runs the configured chain on one trial.
pub fn augment_trial<T: Scalar>(
    x: &Tensor<T>,
    cfg: &AugmentConfig,
    mode: Mode,
    min_frames: usize,
    rng: &mut RngStream,
) -> (Tensor<T>, Vec<AppliedOp>) {
    let mut x = x.clone();
    let mut log = Vec::new();
    let on = cfg.enable;
    if mode == Mode::Train {
        if on.white_noise && cfg.sigma_white > 0.0 {
            white_noise(&mut x, cfg.sigma_white, rng);
            log.push(AppliedOp::WhiteNoise);
        }
        if on.offset && cfg.sigma_offset > 0.0 {
            constant_offset(&mut x, cfg.sigma_offset, rng);
            log.push(AppliedOp::Offset);
        }
        if on.random_walk && cfg.sigma_walk > 0.0 {
            random_walk_noise(&mut x, cfg.sigma_walk, rng);
            log.push(AppliedOp::RandomWalk);
        }
        if on.cutoff && cfg.max_cut > 0 {
            log.push(match temporal_cutoff(&mut x, cfg.max_cut, min_frames, rng) {
                Some(frames) => AppliedOp::Cutoff { frames },
                None => AppliedOp::Skipped {
                    name: "cutoff".into(),
                    reason: format!("{} frames cannot lose {} and keep {min_frames}", dims(&x).0, cfg.max_cut),
                },
            });
        }
        if on.warp && cfg.warp_alpha > 0.0 {
            log.push(match time_warp(&mut x, cfg.warp_alpha, min_frames, rng) {
                Some((factor, length)) => AppliedOp::Warp { factor, length },
                None => AppliedOp::Skipped {
                    name: "warp".into(),
                    reason: format!("warped length would fall below {min_frames}"),
                },
            });
        }
        if on.mask && cfg.n_masks > 0 && cfg.mask_len > 0 {
            let spans = time_mask(&mut x, cfg.n_masks, cfg.mask_len, rng);
            log.push(AppliedOp::Mask { spans });
        }
        if on.channel_dropout && cfg.p_drop > 0.0 {
            let dropped = channel_dropout(&mut x, cfg.p_drop, rng);
            log.push(AppliedOp::ChannelDropout { dropped });
        }
    }
    if on.smoothing {
        x = gaussian_smooth(&x, cfg.smooth_sigma, cfg.smooth_support);
        log.push(AppliedOp::Smooth);
    }
    (x, log)
}

/// A padded batch after augmentation.
#[derive(Clone, Debug)]
pub struct AugmentedBatch<T: Scalar> {
    /// `[B, T, C]`, zero beyond each trial's valid length.
    pub features: Tensor<T>,
    pub valid_lengths: Vec<usize>,
    pub log: Vec<Vec<AppliedOp>>,
}

/// Stacks `[L_i, C]` trials into a zero-padded `[B, max L, C]` tensor.
pub fn pad_trials<T: Scalar>(trials: &[Tensor<T>], channels: usize) -> (Tensor<T>, Vec<usize>) {
    let lengths: Vec<usize> = trials.iter().map(|t| t.shape()[0]).collect();
    let frames = lengths.iter().copied().max().unwrap_or(0);
    let mut data = vec![T::zero(); trials.len() * frames * channels];
    for (b, t) in trials.iter().enumerate() {
        data[b * frames * channels..][..t.len()].copy_from_slice(t.data());
    }
    (
        Tensor::from_vec(&[trials.len(), frames, channels], data).expect("shape"),
        lengths,
    )
}

/// Augments every trial of a list (train: full chain, eval: smoothing only).
/// Trial `i` draws from `rng.derive(i)`.
pub fn apply_pipeline<T: Scalar>(
    trials: &[&Tensor<T>],
    cfg: &AugmentConfig,
    mode: Mode,
    min_frames: usize,
    rng: &RngStream,
) -> AugmentedBatch<T> {
    let channels = trials.first().map(|t| dims(t).1).unwrap_or(0);
    let results: Vec<(Tensor<T>, Vec<AppliedOp>)> = trials
        .par_iter()
        .enumerate()
        .map(|(i, x)| augment_trial(x, cfg, mode, min_frames, &mut rng.derive(i as u64)))
        .collect();
    let (out, log): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let (features, valid_lengths) = pad_trials(&out, channels);
    AugmentedBatch {
        features,
        valid_lengths,
        log,
    }
}
