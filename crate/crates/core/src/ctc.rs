//! Connectionist temporal classification: log-domain forward-backward loss,
//! output-entropy regularizer, greedy decoding and an exhaustive oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numcore::{NumError, Scalar, Tape, Tensor, Var};
use crate::textcodec::{CharVocab, BLANK};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("trial {trial}: target position {position} holds token {token}, outside 1..{vocab}")]
    BadTarget {
        trial: usize,
        position: usize,
        token: u32,
        vocab: usize,
    },
    #[error("trial {trial}, frame {frame}: row is not normalized (logsumexp = {lse})")]
    NotNormalized { trial: usize, frame: usize, lse: f64 },
    #[error("batch layout: {0}")]
    Layout(String),
    #[error("exhaustive enumeration refused for {frames} frames (limit {limit})")]
    TooManyFrames { frames: usize, limit: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

/// How the entropy term enters the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerSign {
    /// `total = ctc − λ·H`: higher entropy lowers the loss, discouraging
    /// over-peaked (blank-collapsed) outputs.
    #[default]
    EntropyBonus,
    /// `total = ctc + λ·H`, the formula read literally.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub sign: RegularizerSign,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.05,
            sign: RegularizerSign::EntropyBonus,
        }
    }
}

/// Inputs of one CTC evaluation.
#[derive(Clone, Debug)]
pub struct CtcBatch<'a> {
    /// `[B, N, V]` log-probabilities.
    pub log_probs: Var,
    pub input_lengths: &'a [usize],
    pub targets: &'a [Vec<u32>],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ctc: f64,
    /// Mean per-frame output entropy `H`.
    pub entropy_term: f64,
    pub total: f64,
    pub lambda: f64,
    pub zeroed_trials: usize,
}

#[inline]
fn log_add<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Frames needed to emit `target`: one per label plus a blank between repeats.
pub fn min_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under `frames × vocab` log-probs, with
/// its gradient with respect to those log-probs. `None` when no alignment
/// fits in the available frames.
pub fn ctc_single<T: Scalar>(
    log_probs: &[T],
    frames: usize,
    vocab: usize,
    target: &[u32],
) -> Option<(T, Vec<T>)> {
    if frames == 0 || frames < min_frames(target) {
        return None;
    }
    let states = 2 * target.len() + 1;
    let label = |s: usize| -> usize {
        if s % 2 == 0 {
            BLANK as usize
        } else {
            target[s / 2] as usize
        }
    };
    let skip_ok = |s: usize| s >= 2 && label(s) != BLANK as usize && label(s) != label(s - 2);
    let ninf = T::neg_infinity();
    let y = |t: usize, k: usize| log_probs[t * vocab + k];

    let mut alpha = vec![ninf; frames * states];
    alpha[0] = y(0, label(0));
    if states > 1 {
        alpha[1] = y(0, label(1));
    }
    for t in 1..frames {
        for s in 0..states {
            let prev = &alpha[(t - 1) * states..t * states];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * states + s] = if acc == ninf { ninf } else { acc + y(t, label(s)) };
        }
    }
    let last = (frames - 1) * states;
    let mut log_p = alpha[last + states - 1];
    if states > 1 {
        log_p = log_add(log_p, alpha[last + states - 2]);
    }
    if !log_p.is_finite() {
        return None;
    }

    // beta excludes the current frame's emission
    let mut beta = vec![ninf; frames * states];
    beta[last + states - 1] = T::zero();
    if states > 1 {
        beta[last + states - 2] = T::zero();
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = (t + 1) * states;
            let mut acc = beta[next + s] + y(t + 1, label(s));
            if s + 1 < states {
                acc = log_add(acc, beta[next + s + 1] + y(t + 1, label(s + 1)));
            }
            if s + 2 < states && skip_ok(s + 2) {
                acc = log_add(acc, beta[next + s + 2] + y(t + 1, label(s + 2)));
            }
            beta[t * states + s] = acc;
        }
    }

    let mut grad = vec![T::zero(); frames * vocab];
    for t in 0..frames {
        for s in 0..states {
            let a = alpha[t * states + s];
            let b = beta[t * states + s];
            if a == ninf || b == ninf {
                continue;
            }
            grad[t * vocab + label(s)] -= (a + b - log_p).exp();
        }
    }
    Some((-log_p, grad))
}

/// Exhaustive CTC oracle over all `vocab^frames` paths of `[N, V]` log-probs.
pub fn brute_force_ctc(log_probs: &Tensor<f64>, target: &[u32]) -> Result<f64, CtcError> {
    const LIMIT: usize = 10;
    let (frames, vocab) = match log_probs.shape() {
        [n, v] => (*n, *v),
        s => return Err(CtcError::Layout(format!("expected [N, V], got {s:?}"))),
    };
    if frames > LIMIT {
        return Err(CtcError::TooManyFrames { frames, limit: LIMIT });
    }
    let lp = log_probs.data();
    let mut path = vec![0usize; frames];
    let mut total = 0.0f64;
    let mut collapsed = Vec::with_capacity(frames);
    loop {
        collapsed.clear();
        let mut prev = usize::MAX;
        for &k in &path {
            if k != prev && k != BLANK as usize {
                collapsed.push(k as u32);
            }
            prev = k;
        }
        if collapsed == target {
            let lsum: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * vocab + k]).sum();
            total += lsum.exp();
        }
        // odometer increment
        let mut i = frames;
        loop {
            if i == 0 {
                return Ok(-total.ln());
            }
            i -= 1;
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
        }
    }
}

fn validate<T: Scalar>(
    lp: &Tensor<T>,
    input_lengths: &[usize],
    targets: &[Vec<u32>],
) -> Result<(usize, usize, usize), CtcError> {
    let (batch, frames, vocab) = match lp.shape() {
        [b, n, v] => (*b, *n, *v),
        s => return Err(CtcError::Layout(format!("log-probs must be [B, N, V], got {s:?}"))),
    };
    if input_lengths.len() != batch || targets.len() != batch {
        return Err(CtcError::Layout(format!(
            "{batch} trials but {} input lengths and {} targets",
            input_lengths.len(),
            targets.len()
        )));
    }
    for (trial, (&len, target)) in input_lengths.iter().zip(targets).enumerate() {
        if len > frames {
            return Err(CtcError::Layout(format!(
                "trial {trial}: input length {len} exceeds {frames} frames"
            )));
        }
        if let Some((position, &token)) = target
            .iter()
            .enumerate()
            .find(|(_, &k)| k == BLANK || k as usize >= vocab)
        {
            return Err(CtcError::BadTarget {
                trial,
                position,
                token,
                vocab,
            });
        }
        for t in 0..len {
            let row = &lp.data()[(trial * frames + t) * vocab..(trial * frames + t + 1) * vocab];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = (m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()).to_f64_lossy();
            if !(lse.abs() <= 1e-3) {
                return Err(CtcError::NotNormalized { trial, frame: t, lse });
            }
        }
    }
    Ok((batch, frames, vocab))
}

impl<T: Scalar> Tape<T> {
    /// Mean over trials of the per-trial CTC negative log-likelihood (blank 0).
    /// Trials whose input is too short for their target contribute zero loss
    /// and zero gradient; their count is returned alongside.
    pub fn ctc_loss(&mut self, batch: &CtcBatch<'_>) -> Result<(Var, usize), CtcError> {
        let lp_var = batch.log_probs;
        let (b, frames, vocab) = validate(self.value(lp_var), batch.input_lengths, batch.targets)?;
        let data = self.value(lp_var).data();
        let per_trial: Vec<Option<(T, Vec<T>)>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let len = batch.input_lengths[i];
                let rows = &data[i * frames * vocab..(i * frames + len) * vocab];
                ctc_single(rows, len, vocab, &batch.targets[i])
            })
            .collect();
        let zeroed = per_trial.iter().filter(|r| r.is_none()).count();
        let inv_b = T::one() / T::lit(b.max(1) as f64);
        let mut loss = T::zero();
        for (l, _) in per_trial.iter().flatten() {
            loss += *l;
        }
        loss *= inv_b;
        let mut grad = vec![T::zero(); b * frames * vocab];
        for (i, r) in per_trial.into_iter().enumerate() {
            if let Some((_, g)) = r {
                let dst = &mut grad[i * frames * vocab..i * frames * vocab + g.len()];
                for (d, v) in dst.iter_mut().zip(g) {
                    *d = v * inv_b;
                }
            }
        }
        let grad = Tensor::from_vec(&[b, frames, vocab], grad)?;
        let var = self.push(
            "ctc_loss",
            Tensor::scalar(loss),
            &[lp_var],
            Box::new(move |ctx| {
                let s = ctx.grad.data()[0];
                vec![Some(grad.map(|g| g * s))]
            }),
        );
        Ok((var, zeroed))
    }

    /// Mean Shannon entropy `−Σ p log p` of the output distribution over all
    /// valid frames of the batch.
    pub fn entropy_regularizer(&mut self, log_probs: Var, input_lengths: &[usize]) -> Result<Var, CtcError> {
        let (batch, frames, vocab) = match self.shape(log_probs) {
            [b, n, v] => (*b, *n, *v),
            s => return Err(CtcError::Layout(format!("log-probs must be [B, N, V], got {s:?}"))),
        };
        if input_lengths.len() != batch || input_lengths.iter().any(|&l| l > frames) {
            return Err(CtcError::Layout("input lengths do not fit the batch".into()));
        }
        let count: usize = input_lengths.iter().sum();
        let inv = T::one() / T::lit(count.max(1) as f64);
        let lengths = input_lengths.to_vec();
        let data = self.value(log_probs).data();
        let mut h = T::zero();
        for (b, &len) in lengths.iter().enumerate() {
            for v in &data[b * frames * vocab..(b * frames + len) * vocab] {
                let p = v.exp();
                if p > T::zero() {
                    h -= p * *v;
                }
            }
        }
        h *= inv;
        Ok(self.push(
            "entropy_regularizer",
            Tensor::scalar(h),
            &[log_probs],
            Box::new(move |ctx| {
                let s = ctx.grad.data()[0] * inv;
                let y = ctx.inputs[0].data();
                let mut d = vec![T::zero(); y.len()];
                for (b, &len) in lengths.iter().enumerate() {
                    let range = b * frames * vocab..(b * frames + len) * vocab;
                    for (dv, &yv) in d[range.clone()].iter_mut().zip(&y[range]) {
                        let p = yv.exp();
                        if p > T::zero() {
                            *dv = -s * p * (yv + T::one());
                        }
                    }
                }
                vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), d).expect("shape"))]
            }),
        ))
    }

    /// CTC plus the signed, λ-weighted entropy term.
    pub fn ctc_objective(
        &mut self,
        batch: &CtcBatch<'_>,
        cfg: &LossConfig,
    ) -> Result<(Var, LossBreakdown), CtcError> {
        let (ctc, zeroed) = self.ctc_loss(batch)?;
        let entropy = self.entropy_regularizer(batch.log_probs, batch.input_lengths)?;
        let signed = match cfg.sign {
            RegularizerSign::EntropyBonus => -cfg.lambda,
            RegularizerSign::Literal => cfg.lambda,
        };
        let weighted = self.scale(entropy, T::lit(signed));
        let total = self.add(ctc, weighted)?;
        let breakdown = LossBreakdown {
            ctc: self.value(ctc).data()[0].to_f64_lossy(),
            entropy_term: self.value(entropy).data()[0].to_f64_lossy(),
            total: self.value(total).data()[0].to_f64_lossy(),
            lambda: cfg.lambda,
            zeroed_trials: zeroed,
        };
        Ok((total, breakdown))
    }
}

/// Per-frame argmax over the first `valid_length` rows of `[N, V]` scores
/// (ties resolve to the lower index).
pub fn argmax_path<T: Scalar>(rows: &[T], vocab: usize, valid_length: usize) -> Vec<u32> {
    rows.chunks(vocab)
        .take(valid_length)
        .map(|row| {
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

/// Merge runs of equal tokens, then drop blanks.
pub fn collapse_path(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Greedy (best-path) decoding of `[N, V]` log-probabilities to text.
/// Tokens outside the character range are dropped.
pub fn greedy_decode<T: Scalar>(rows: &[T], vocab: usize, valid_length: usize, codec: &CharVocab) -> String {
    let tokens: Vec<u32> = collapse_path(&argmax_path(rows, vocab, valid_length))
        .into_iter()
        .filter(|&k| (1..=128).contains(&k))
        .collect();
    codec.decode_tokens(&tokens).expect("filtered to character tokens")
}
