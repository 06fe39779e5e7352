//! Style injection operators: attention-pooled adaptive instance
//! normalization for the time-invariant path, adaptive layer normalization
//! for conditioning sequences, and instance-normalized cross-attention for
//! the time-variant path.

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Var};
use crate::{init, NORM_EPS};
use rand_chacha::ChaCha8Rng;

/// Softmax-weighted combination of rows. `weight` scores each row; the output
/// is the convex combination of the rows under those scores.
pub fn attention_pool(tape: &mut Tape, rows: Var, weight: Var) -> Result<Var> {
    let shape = tape.shape(rows);
    if shape.len() != 2 {
        return Err(Error::Shape(format!("attention_pool wants [R×C], got {shape:?}")));
    }
    let scores = tape.matmul(rows, weight)?; // [R×1]
    let scores = tape.transpose2(scores)?; // [1×R]
    let alpha = tape.softmax(scores, 1)?;
    tape.matmul(alpha, rows) // [1×C]
}

/// Layer normalization whose gain and shift are affine functions of a
/// conditioning vector. Initialized to the identity on the gain path.
pub struct AdaLayerNorm {
    w_gain: ParamId,
    b_gain: ParamId,
    w_shift: ParamId,
    b_shift: ParamId,
    channels: usize,
}

impl AdaLayerNorm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cond_dim: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let _ = rng; // gain/shift projections start at the identity
        let w_gain = store.register(&format!("{prefix}.w_gain"), init::zeros(&[cond_dim, channels]))?;
        let b_gain = store.register(&format!("{prefix}.b_gain"), init::ones(&[1, channels]))?;
        let w_shift = store.register(&format!("{prefix}.w_shift"), init::zeros(&[cond_dim, channels]))?;
        let b_shift = store.register(&format!("{prefix}.b_shift"), init::zeros(&[1, channels]))?;
        Ok(Self {
            w_gain,
            b_gain,
            w_shift,
            b_shift,
            channels,
        })
    }

    /// g(cond) ⊙ LN(h) + b(cond), normalizing the trailing channel axis.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, h: Var, cond: Var) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.last() != Some(&self.channels) {
            return Err(Error::Shape(format!(
                "ada_ln expects trailing channel {}, got {shape:?}",
                self.channels
            )));
        }
        let normed = tape.normalize(h, crate::tensor::NormKind::Layer, NORM_EPS)?;
        let w_gain = tape.param(store, self.w_gain);
        let b_gain = tape.param(store, self.b_gain);
        let w_shift = tape.param(store, self.w_shift);
        let b_shift = tape.param(store, self.b_shift);
        let gain = tape.linear(cond, w_gain, b_gain)?; // [1×C]
        let shift = tape.linear(cond, w_shift, b_shift)?;
        let mut bshape = vec![1usize; shape.len()];
        bshape[shape.len() - 1] = self.channels;
        let gain = tape.reshape(gain, &bshape)?;
        let shift = tape.reshape(shift, &bshape)?;
        let scaled = tape.broadcast_mul(normed, gain)?;
        tape.broadcast_add(scaled, shift)
    }
}

/// Adaptive instance normalization driven by pooled multi-level statistics of
/// the reference feature maps, with the diffusion time embedding participating
/// in the pooling so the injected style can vary over denoising steps.
pub struct TimeInvariantAdapter {
    pool_mean: ParamId,
    pool_std: ParamId,
    t_proj_w: ParamId,
    t_proj_b: ParamId,
}

impl TimeInvariantAdapter {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        time_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let pool_mean = store.register(
            &format!("{prefix}.pool_mean"),
            init::linear(&[channels, 1], rng),
        )?;
        let pool_std = store.register(
            &format!("{prefix}.pool_std"),
            init::linear(&[channels, 1], rng),
        )?;
        let t_proj_w = store.register(
            &format!("{prefix}.t_proj_w"),
            init::linear(&[time_dim, channels], rng),
        )?;
        let t_proj_b = store.register(&format!("{prefix}.t_proj_b"), init::zeros(&[1, channels]))?;
        Ok(Self {
            pool_mean,
            pool_std,
            t_proj_w,
            t_proj_b,
        })
    }

    /// Pools per-layer channel means and standard deviations of `level_maps`
    /// (shape [L×C×T_ref]) together with a projected time row, then rescales
    /// the instance-normalized stream to the pooled statistics.
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stream: Var,
        level_maps: Var,
        t_emb: Var,
    ) -> Result<Var> {
        let (mu, sigma) = self.pooled_stats(tape, store, level_maps, t_emb)?;
        apply_adain(tape, stream, mu, sigma)
    }

    /// The pooled (μ, σ) pair; σ is softplus-mapped to stay positive.
    pub fn pooled_stats(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        level_maps: Var,
        t_emb: Var,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(level_maps).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "level maps must be [L×C×T], got {shape:?}"
            )));
        }
        let (layers, channels) = (shape[0], shape[1]);
        let t_w = tape.param(store, self.t_proj_w);
        let t_b = tape.param(store, self.t_proj_b);
        let t_row = tape.linear(t_emb, t_w, t_b)?; // [1×C]

        let mean = tape.mean_axis(level_maps, 2)?;
        let mean = tape.reshape(mean, &[layers, channels])?;
        let sq = tape.mul(level_maps, level_maps)?;
        let mean_sq = tape.mean_axis(sq, 2)?;
        let mean_sq = tape.reshape(mean_sq, &[layers, channels])?;
        let mean2 = tape.mul(mean, mean)?;
        let var = tape.sub(mean_sq, mean2)?;
        // tiny floor keeps sqrt differentiable when a map is constant in time
        let var = tape.add_scalar(var, 1e-12)?;
        let std = tape.sqrt(var)?;

        let mean_rows = tape.concat(&[t_row, mean], 0)?;
        let std_rows = tape.concat(&[t_row, std], 0)?;
        let w_mean = tape.param(store, self.pool_mean);
        let w_std = tape.param(store, self.pool_std);
        let mu = attention_pool(tape, mean_rows, w_mean)?;
        let sigma_raw = attention_pool(tape, std_rows, w_std)?;
        let sigma = tape.softplus(sigma_raw)?;
        Ok((mu, sigma))
    }
}

/// IN(stream)·σ + μ with channel-wise broadcasting over a [C×F×T] stream.
pub fn apply_adain(tape: &mut Tape, stream: Var, mu: Var, sigma: Var) -> Result<Var> {
    let shape = tape.shape(stream).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("adain stream must be [C×F×T], got {shape:?}")));
    }
    let channels = shape[0];
    if tape.value(mu).numel() != channels || tape.value(sigma).numel() != channels {
        return Err(Error::Shape(format!(
            "adain stats must have {channels} channels"
        )));
    }
    let normed = tape.normalize(stream, crate::tensor::NormKind::Instance, NORM_EPS)?;
    let sigma = tape.reshape(sigma, &[channels, 1, 1])?;
    let mu = tape.reshape(mu, &[channels, 1, 1])?;
    let scaled = tape.broadcast_mul(normed, sigma)?;
    tape.broadcast_add(scaled, mu)
}

/// Cross-attention from the instance-normalized diffusion stream (queries)
/// into per-frame reference styles (keys and values), applied residually.
pub struct CrossAttentionAdapter {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    /// Scores are used unscaled by default; this switches on 1/√d scaling.
    pub scale_scores: bool,
    /// Add the attended context back onto the stream rather than replacing it.
    pub residual: bool,
    attn_dim: usize,
}

impl CrossAttentionAdapter {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        style_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let wq = store.register(&format!("{prefix}.wq"), init::linear(&[channels, channels], rng))?;
        let wk = store.register(&format!("{prefix}.wk"), init::linear(&[style_dim, channels], rng))?;
        let wv = store.register(&format!("{prefix}.wv"), init::linear(&[style_dim, channels], rng))?;
        // zero-initialized output keeps the adapter silent at the start
        let wo = store.register(&format!("{prefix}.wo"), init::zeros(&[channels, channels]))?;
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            scale_scores: false,
            residual: true,
            attn_dim: channels,
        })
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stream: Var,
        frame_styles: Var,
    ) -> Result<Var> {
        self.apply_inner(tape, store, stream, frame_styles).map(|(out, _)| out)
    }

    /// Like [`CrossAttentionAdapter::apply`] but also returns the attention
    /// matrix, one row per (frequency, time) query position.
    pub fn apply_with_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stream: Var,
        frame_styles: Var,
    ) -> Result<(Var, Var)> {
        self.apply_inner(tape, store, stream, frame_styles)
    }

    fn apply_inner(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stream: Var,
        frame_styles: Var,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(stream).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "cross-attention stream must be [C×F×T], got {shape:?}"
            )));
        }
        let (c, f, t) = (shape[0], shape[1], shape[2]);
        let normed = tape.normalize(stream, crate::tensor::NormKind::Instance, NORM_EPS)?;
        let seq = tape.transpose(normed, &[1, 2, 0])?;
        let seq = tape.reshape(seq, &[f * t, c])?;
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let wo = tape.param(store, self.wo);
        let q = tape.matmul(seq, wq)?;
        let k = tape.matmul(frame_styles, wk)?;
        let v = tape.matmul(frame_styles, wv)?;
        let kt = tape.transpose2(k)?;
        let mut logits = tape.matmul(q, kt)?;
        if self.scale_scores {
            logits = tape.scale(logits, 1.0 / (self.attn_dim as f64).sqrt())?;
        }
        let attn = tape.softmax(logits, 1)?;
        let ctx = tape.matmul(attn, v)?;
        let out = tape.matmul(ctx, wo)?;
        let out = tape.reshape(out, &[f, t, c])?;
        let out = tape.transpose(out, &[2, 0, 1])?;
        let out = if self.residual {
            tape.add(stream, out)?
        } else {
            out
        };
        Ok((out, attn))
    }
}
