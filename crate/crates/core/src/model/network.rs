use crate::numcore::{patch_count, BatchNormState, BatchStats, Mode, RngStream, Scalar, Tape, Tensor, Var};

use super::config::ModelConfig;
use super::params::{Binding, ParamGroup, ParamId, ParamStore};
use super::ModelError;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    pub norm: Norm,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvModule {
    pub norm: Norm,
    pub pw1: Linear,
    pub dw: Linear,
    pub bn: Norm,
    pub pw2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Block {
    pub ffn1: FeedForward,
    pub mhsa: Attention,
    pub conv: ConvModule,
    pub ffn2: FeedForward,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub align: Vec<Linear>,
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub head1: Linear,
    pub head2: Linear,
}

/// Features of one batch: `[B, T, C]` with per-trial valid frame counts and
/// session indices. Frames past a trial's length are never read.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a, T: Scalar> {
    pub features: &'a Tensor<T>,
    pub lengths: &'a [usize],
    pub sessions: &'a [usize],
}

pub struct ModelOutput<T: Scalar> {
    /// `[B, N, V]` log-probabilities.
    pub log_probs: Var,
    pub token_lengths: Vec<usize>,
    /// Batch-norm statistics per block, present when run in train mode.
    pub bn_stats: Vec<BatchStats<T>>,
}

/// Dropout and batch-norm behaviour of one forward pass. Train mode with no
/// RNG runs batch-norm on batch statistics without dropout, which is what
/// recomputing running statistics needs.
pub struct Pass<'r> {
    pub mode: Mode,
    pub rng: Option<&'r mut RngStream>,
}

impl<'r> Pass<'r> {
    pub fn eval() -> Self {
        Pass { mode: Mode::Eval, rng: None }
    }

    pub fn train(rng: &'r mut RngStream) -> Self {
        Pass { mode: Mode::Train, rng: Some(rng) }
    }

    pub fn calibrate() -> Self {
        Pass { mode: Mode::Train, rng: None }
    }
}

/// Interleaved sinusoidal table: even columns `sin(pos / 10000^(2i/d))`,
/// odd columns the matching cosine.
pub fn sinusoidal_table<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_vec(&[len, d], data).expect("shape")
}

/// Session-aligned Conformer CTC decoder.
#[derive(Clone, Debug)]
pub struct DecoderModel<T: Scalar> {
    pub(crate) cfg: ModelConfig,
    pub(crate) store: ParamStore<T>,
    pub(crate) bn: Vec<BatchNormState<T>>,
    pub(crate) layout: Layout,
    pos: Tensor<T>,
}

struct Init<'a, T: Scalar> {
    store: ParamStore<T>,
    rng: &'a mut RngStream,
}

impl<T: Scalar> Init<'_, T> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::lit(self.rng.uniform_range(-bound, bound))).collect()
        };
        let w = Tensor::from_vec(&[fan_in, fan_out], draw(fan_in * fan_out)).expect("shape");
        let b = Tensor::from_vec(&[fan_out], draw(fan_out)).expect("shape");
        Linear {
            w: self.store.add(format!("{name}.w"), w, ParamGroup::Base),
            b: self.store.add(format!("{name}.b"), b, ParamGroup::Base),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::ones(&[d]), ParamGroup::Base),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[d]), ParamGroup::Base),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            norm: self.norm(&format!("{name}.norm"), d),
            up: self.linear(&format!("{name}.w1"), d, d_ff),
            down: self.linear(&format!("{name}.w2"), d_ff, d),
        }
    }
}

impl<T: Scalar> DecoderModel<T> {
    pub fn new(cfg: ModelConfig, rng: &mut RngStream) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (c, d) = (cfg.channels, cfg.d_model);
        let mut init = Init { store: ParamStore::new(), rng };
        let mut align = Vec::with_capacity(cfg.num_sessions);
        for s in 0..cfg.num_sessions {
            align.push(Linear {
                w: init.store.add(format!("align.W.{s}"), Tensor::eye(c), ParamGroup::Day),
                b: init.store.add(format!("align.b.{s}"), Tensor::zeros(&[c]), ParamGroup::Day),
            });
        }
        let embed = init.linear("embed.proj", cfg.patch_size * c, d);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let p = format!("block.{i}");
            let ffn1 = init.ffn(&format!("{p}.ffn1"), d, cfg.d_ff);
            let mhsa = Attention {
                norm: init.norm(&format!("{p}.mhsa.norm"), d),
                q: init.linear(&format!("{p}.mhsa.q"), d, d),
                k: init.linear(&format!("{p}.mhsa.k"), d, d),
                v: init.linear(&format!("{p}.mhsa.v"), d, d),
                out: init.linear(&format!("{p}.mhsa.out"), d, d),
            };
            let conv = ConvModule {
                norm: init.norm(&format!("{p}.conv.norm"), d),
                pw1: init.linear(&format!("{p}.conv.pw1"), d, 2 * d),
                // kernel stored [K, D]; each channel's fan-in is K
                dw: init.linear(&format!("{p}.conv.dw"), cfg.conv_kernel, d),
                bn: init.norm(&format!("{p}.conv.bn"), d),
                pw2: init.linear(&format!("{p}.conv.pw2"), d, d),
            };
            let ffn2 = init.ffn(&format!("{p}.ffn2"), d, cfg.d_ff);
            let norm = init.norm(&format!("{p}.norm"), d);
            blocks.push(Block { ffn1, mhsa, conv, ffn2, norm });
        }
        let head1 = init.linear("head.w1", d, d);
        let head2 = init.linear("head.w2", d, cfg.vocab_size);
        let store = init.store;
        Ok(DecoderModel {
            bn: (0..cfg.num_blocks).map(|_| BatchNormState::new(d)).collect(),
            pos: sinusoidal_table(cfg.max_pos_len, d),
            layout: Layout { align, embed, blocks, head1, head2 },
            store,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn
    }

    pub fn positional_table(&self) -> &Tensor<T> {
        &self.pos
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn commit_bn(&mut self, stats: &[BatchStats<T>]) {
        for (state, s) in self.bn.iter_mut().zip(stats) {
            state.update(s);
        }
    }

    /// Valid token count of a trial with `frames` valid frames.
    pub fn token_count(&self, frames: usize) -> Option<usize> {
        patch_count(frames, self.cfg.patch_size, self.cfg.stride)
    }

    pub fn alignment_ids(&self, session: usize) -> (ParamId, ParamId) {
        let l = self.layout.align[session];
        (l.w, l.b)
    }

    pub fn head_ids(&self) -> [ParamId; 4] {
        let (a, b) = (self.layout.head1, self.layout.head2);
        [a.w, a.b, b.w, b.b]
    }

    pub fn embed_ids(&self) -> (ParamId, ParamId) {
        (self.layout.embed.w, self.layout.embed.b)
    }

    fn check_input(&self, input: &ModelInput<'_, T>) -> Result<(usize, usize), ModelError> {
        let s = input.features.shape();
        if s.len() != 3 || s[2] != self.cfg.channels {
            return Err(ModelError::Input(format!(
                "features must be [B, T, {}], got {s:?}",
                self.cfg.channels
            )));
        }
        let (batch, frames) = (s[0], s[1]);
        if input.lengths.len() != batch || input.sessions.len() != batch {
            return Err(ModelError::Input(format!(
                "{batch} trials with {} lengths and {} session ids",
                input.lengths.len(),
                input.sessions.len()
            )));
        }
        for (trial, (&len, &session)) in input.lengths.iter().zip(input.sessions).enumerate() {
            if session >= self.cfg.num_sessions {
                return Err(ModelError::SessionOutOfRange {
                    trial,
                    session,
                    sessions: self.cfg.num_sessions,
                });
            }
            if len > frames {
                return Err(ModelError::Input(format!(
                    "trial {trial}: length {len} exceeds the {frames}-frame buffer"
                )));
            }
            if len < self.cfg.patch_size {
                return Err(ModelError::TrialTooShort {
                    trial,
                    frames: len,
                    patch: self.cfg.patch_size,
                });
            }
            if len > self.cfg.max_frames() {
                return Err(ModelError::Input(format!(
                    "trial {trial}: {len} frames exceed the positional table"
                )));
            }
        }
        Ok((batch, frames))
    }

    fn affine(&self, tape: &mut Tape<T>, bind: &mut Binding, x: Var, l: Linear) -> Result<Var, ModelError> {
        let w = bind.var(tape, &self.store, l.w);
        let b = bind.var(tape, &self.store, l.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }

    fn layer_norm(&self, tape: &mut Tape<T>, bind: &mut Binding, x: Var, n: Norm) -> Result<Var, ModelError> {
        let g = bind.var(tape, &self.store, n.gamma);
        let b = bind.var(tape, &self.store, n.beta);
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, pass: &mut Pass<'_>) -> Result<Var, ModelError> {
        match pass.rng.as_deref_mut() {
            Some(rng) => Ok(tape.dropout(x, self.cfg.dropout, rng, pass.mode)?),
            None => Ok(x),
        }
    }

    /// Per-session affine map followed by SiLU. Padded frames come out zero.
    pub fn align_session(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        input: &ModelInput<'_, T>,
    ) -> Result<Var, ModelError> {
        self.check_input(input)?;
        // pad values never reach the graph, NaN included
        let mut clean = input.features.clone();
        let (frames, c) = (clean.shape()[1], clean.shape()[2]);
        for (b, &len) in input.lengths.iter().enumerate() {
            clean.data_mut()[(b * frames + len) * c..(b + 1) * frames * c].fill(T::zero());
        }
        let x = tape.constant(clean);
        let mut ws = Vec::with_capacity(input.sessions.len());
        let mut bs = Vec::with_capacity(input.sessions.len());
        for &s in input.sessions {
            let l = self.layout.align[s];
            ws.push(bind.var(tape, &self.store, l.w));
            bs.push(bind.var(tape, &self.store, l.b));
        }
        let y = tape.routed_affine(x, &ws, &bs)?;
        let y = tape.silu(y);
        Ok(tape.zero_padded(y, input.lengths)?)
    }

    /// Patch projection plus positional encoding and input dropout.
    /// Returns tokens `[B, N, d_model]` and the valid token count per trial.
    pub fn patch_embed(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        x: Var,
        lengths: &[usize],
        pass: &mut Pass<'_>,
    ) -> Result<(Var, Vec<usize>), ModelError> {
        let (p, s, d) = (self.cfg.patch_size, self.cfg.stride, self.cfg.d_model);
        let shape = tape.shape(x).to_vec();
        let mut token_lengths = Vec::with_capacity(lengths.len());
        for (trial, &len) in lengths.iter().enumerate() {
            token_lengths.push(patch_count(len, p, s).ok_or(ModelError::TrialTooShort {
                trial,
                frames: len,
                patch: p,
            })?);
        }
        let patches = tape.unfold_patches(x, p, s)?;
        let tokens = self.affine(tape, bind, patches, self.layout.embed)?;
        let n = tape.shape(tokens)[1];
        if n > self.cfg.max_pos_len {
            return Err(ModelError::Input(format!("{n} tokens exceed the positional table")));
        }
        let rows = &self.pos.data()[..n * d];
        let mut tiled = Vec::with_capacity(shape[0] * n * d);
        for _ in 0..shape[0] {
            tiled.extend_from_slice(rows);
        }
        let pos = tape.constant(Tensor::from_vec(&[shape[0], n, d], tiled)?);
        let z = tape.add(tokens, pos)?;
        let z = self.dropout(tape, z, pass)?;
        Ok((tape.zero_padded(z, &token_lengths)?, token_lengths))
    }

    fn feed_forward(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        x: Var,
        f: FeedForward,
        pass: &mut Pass<'_>,
    ) -> Result<Var, ModelError> {
        let h = self.layer_norm(tape, bind, x, f.norm)?;
        let h = self.affine(tape, bind, h, f.up)?;
        let h = tape.silu(h);
        let h = self.dropout(tape, h, pass)?;
        let h = self.affine(tape, bind, h, f.down)?;
        let h = self.dropout(tape, h, pass)?;
        let h = tape.scale(h, T::lit(0.5));
        Ok(tape.add(x, h)?)
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        x: Var,
        a: Attention,
        key_valid: &[bool],
        pass: &mut Pass<'_>,
    ) -> Result<Var, ModelError> {
        let s = tape.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let h = self.cfg.heads;
        let dh = d / h;
        let y = self.layer_norm(tape, bind, x, a.norm)?;
        let mut split = |tape: &mut Tape<T>, l: Linear| -> Result<Var, ModelError> {
            let v = self.affine(tape, bind, y, l)?;
            let v = tape.reshape(v, &[b, n, h, dh])?;
            let v = tape.transpose12(v)?;
            Ok(tape.reshape(v, &[b * h, n, dh])?)
        };
        let q = split(tape, a.q)?;
        let k = split(tape, a.k)?;
        let v = split(tape, a.v)?;
        let scores = tape.batched_matmul(q, k, true)?;
        let scores = tape.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let attn = tape.masked_softmax(scores, key_valid, h)?;
        let ctx = tape.batched_matmul(attn, v, false)?;
        let ctx = tape.reshape(ctx, &[b, h, n, dh])?;
        let ctx = tape.transpose12(ctx)?;
        let ctx = tape.reshape(ctx, &[b, n, d])?;
        let out = self.affine(tape, bind, ctx, a.out)?;
        let out = self.dropout(tape, out, pass)?;
        Ok(tape.add(x, out)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_module(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        x: Var,
        c: ConvModule,
        bn: &BatchNormState<T>,
        token_lengths: &[usize],
        valid: &[bool],
        pass: &mut Pass<'_>,
    ) -> Result<(Var, Option<BatchStats<T>>), ModelError> {
        let y = self.layer_norm(tape, bind, x, c.norm)?;
        let y = self.affine(tape, bind, y, c.pw1)?;
        let y = tape.glu(y)?;
        let y = tape.zero_padded(y, token_lengths)?;
        let kernel = bind.var(tape, &self.store, c.dw.w);
        let y = tape.depthwise_conv1d(y, kernel)?;
        let dw_bias = bind.var(tape, &self.store, c.dw.b);
        let y = tape.add_bias(y, dw_bias)?;
        let gamma = bind.var(tape, &self.store, c.bn.gamma);
        let beta = bind.var(tape, &self.store, c.bn.beta);
        let (y, stats) = tape.batch_norm_1d(y, valid, gamma, beta, bn, pass.mode)?;
        let y = tape.silu(y);
        let y = self.affine(tape, bind, y, c.pw2)?;
        let y = self.dropout(tape, y, pass)?;
        Ok((tape.add(x, y)?, stats))
    }

    /// Runs the Conformer stack over `[B, N, d_model]` tokens.
    pub fn conformer_forward(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        tokens: Var,
        token_lengths: &[usize],
        pass: &mut Pass<'_>,
    ) -> Result<(Var, Vec<BatchStats<T>>), ModelError> {
        let s = tape.shape(tokens).to_vec();
        let (batch, n) = (s[0], s[1]);
        if token_lengths.len() != batch {
            return Err(ModelError::Input("token lengths do not match the batch".into()));
        }
        if let Some(trial) = token_lengths.iter().position(|&l| l == 0) {
            return Err(ModelError::Input(format!("trial {trial} has no valid tokens")));
        }
        let valid: Vec<bool> = (0..batch * n).map(|i| i % n < token_lengths[i / n]).collect();
        let mut x = tokens;
        let mut stats = Vec::new();
        for (block, bn) in self.layout.blocks.iter().zip(&self.bn) {
            x = self.feed_forward(tape, bind, x, block.ffn1, pass)?;
            x = self.attention(tape, bind, x, block.mhsa, &valid, pass)?;
            let (y, st) = self.conv_module(tape, bind, x, block.conv, bn, token_lengths, &valid, pass)?;
            x = y;
            stats.extend(st);
            x = self.feed_forward(tape, bind, x, block.ffn2, pass)?;
            x = self.layer_norm(tape, bind, x, block.norm)?;
        }
        Ok((x, stats))
    }

    /// Two-layer head and log-softmax: `[B, N, d_model] -> [B, N, V]`.
    pub fn predict_logits(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        h: Var,
        pass: &mut Pass<'_>,
    ) -> Result<Var, ModelError> {
        let y = self.affine(tape, bind, h, self.layout.head1)?;
        let y = tape.silu(y);
        let y = self.dropout(tape, y, pass)?;
        let y = self.affine(tape, bind, y, self.layout.head2)?;
        Ok(tape.log_softmax(y))
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        input: &ModelInput<'_, T>,
        pass: &mut Pass<'_>,
    ) -> Result<ModelOutput<T>, ModelError> {
        let x = self.align_session(tape, bind, input)?;
        let (tokens, token_lengths) = self.patch_embed(tape, bind, x, input.lengths, pass)?;
        let (h, bn_stats) = self.conformer_forward(tape, bind, tokens, &token_lengths, pass)?;
        let log_probs = self.predict_logits(tape, bind, h, pass)?;
        Ok(ModelOutput {
            log_probs,
            token_lengths,
            bn_stats,
        })
    }

    /// Eval-mode log-probabilities, one `[N_i, V]` tensor per trial.
    pub fn infer(&self, input: &ModelInput<'_, T>) -> Result<Vec<Tensor<T>>, ModelError> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(&self.store, false);
        let out = self.forward(&mut tape, &mut bind, input, &mut Pass::eval())?;
        let lp = tape.value(out.log_probs);
        let (n, v) = (lp.shape()[1], lp.shape()[2]);
        Ok(out
            .token_lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| {
                let rows = lp.data()[b * n * v..(b * n + len) * v].to_vec();
                Tensor::from_vec(&[len, v], rows).expect("shape")
            })
            .collect())
    }
}
