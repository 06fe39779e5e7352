//! The diffusion decoder: a preconditioned denoiser network (down/up conv
//! stages around an adapter bottleneck, overlapping patchify, content-derived
//! patch embedding, transformer blocks) plus the weighted denoising loss and
//! the Euler probability-flow sampler.

mod dit;
mod patch;
mod schedule;

pub use dit::{DitBlock, TimeEmbedding};
pub use patch::{OverlapPatchify, PatchEmbedKind, PatchEmbedding, Unpatchify};
pub use schedule::{NoiseSchedule, TraceRow};

use crate::adapters::{CrossAttentionAdapter, TimeInvariantAdapter};
use crate::error::{Error, Result};
use crate::styles::StyleTensors;
use crate::tensor::{NormKind, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{init, NORM_EPS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Dimensions of the style inputs consumed by the bottleneck adapters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct StyleDims {
    /// Channel width of the stacked reference maps.
    pub channels: usize,
    /// Row width of the per-frame quantized styles.
    pub dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    pub mel_bins: usize,
    pub hidden: usize,
    pub patch: usize,
    pub dit_blocks: usize,
    pub dit_heads: usize,
    pub mlp_mult: usize,
    pub embed_kind: PatchEmbedKind,
    /// Longest utterance the learnable time embedding must cover.
    pub max_frames: usize,
    pub overlap: bool,
    /// `None` builds the reference-free decoder without adapters.
    pub style: Option<StyleDims>,
    pub scale_qk_adapter: bool,
    pub adapter_residual: bool,
    /// Start sampling from cond + σ_max·ε instead of pure noise.
    pub mean_shift_prior: bool,
}

impl DecoderConfig {
    /// Both spatial axes must be divisible by this before the bottleneck:
    /// one factor 2 from the down stage and one factor P from patchify.
    pub fn unit(&self) -> usize {
        2 * self.patch
    }

    pub fn padded_bins(&self) -> usize {
        next_multiple(self.mel_bins, self.unit())
    }

    /// Frequency extent of the patch grid, fixed by the mel band count.
    pub fn freq_cells(&self) -> usize {
        self.padded_bins() / self.unit()
    }

    pub fn max_time_cells(&self) -> usize {
        next_multiple(self.max_frames.max(1), self.unit()) / self.unit()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mel_bins == 0 || self.hidden == 0 || self.patch == 0 || self.dit_blocks == 0 {
            return Err(Error::Config("decoder extents must be positive".into()));
        }
        if self.hidden % self.dit_heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.dit_heads
            )));
        }
        if self.hidden % 2 != 0 {
            return Err(Error::Config("hidden width must be even".into()));
        }
        Ok(())
    }
}

fn next_multiple(n: usize, unit: usize) -> usize {
    n.div_ceil(unit) * unit
}

/// Style conditioning on the current tape.
#[derive(Clone, Copy)]
pub struct StyleRefs {
    pub level_maps: Var,
    pub framewise: Var,
}

struct ResBlock {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ResBlock {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w1: store.register(&format!("{prefix}.w1"), init::conv(&[channels, channels, 3, 3], rng))?,
            b1: store.register(&format!("{prefix}.b1"), init::zeros(&[channels, 1, 1]))?,
            w2: store.register(&format!("{prefix}.w2"), init::conv(&[channels, channels, 3, 3], rng))?,
            b2: store.register(&format!("{prefix}.b2"), init::zeros(&[channels, 1, 1]))?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = tape.normalize(x, NormKind::Instance, NORM_EPS)?;
        let h = tape.swish(h)?;
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let h = tape.conv2d(h, w1, (1, 1), (1, 1))?;
        let h = tape.broadcast_add(h, b1)?;
        let h = tape.normalize(h, NormKind::Instance, NORM_EPS)?;
        let h = tape.swish(h)?;
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.conv2d(h, w2, (1, 1), (1, 1))?;
        let h = tape.broadcast_add(h, b2)?;
        tape.add(x, h)
    }
}

/// The denoiser network together with its preconditioning wrapper.
pub struct Denoiser {
    cfg: DecoderConfig,
    time: TimeEmbedding,
    in_w: ParamId,
    in_b: ParamId,
    down_res: ResBlock,
    down_w: ParamId,
    down_b: ParamId,
    mid_res: ResBlock,
    tiv_adapter: Option<TimeInvariantAdapter>,
    tv_adapter: Option<CrossAttentionAdapter>,
    patchify: OverlapPatchify,
    embed: PatchEmbedding,
    dit: Vec<DitBlock>,
    unpatch: Unpatchify,
    up_w: ParamId,
    up_b: ParamId,
    up_res: ResBlock,
    out_w: ParamId,
    out_b: ParamId,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, cfg: DecoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.hidden;
        let time = TimeEmbedding::new(store, "dec.time", c, rng)?;
        let in_channels = 2 + c;
        let in_w = store.register("dec.in_w", init::conv(&[c, in_channels, 3, 3], rng))?;
        let in_b = store.register("dec.in_b", init::zeros(&[c, 1, 1]))?;
        let down_res = ResBlock::new(store, "dec.down_res", c, rng)?;
        let down_w = store.register("dec.down_w", init::conv(&[c, c, 3, 3], rng))?;
        let down_b = store.register("dec.down_b", init::zeros(&[c, 1, 1]))?;
        let mid_res = ResBlock::new(store, "dec.mid_res", c, rng)?;
        let (tiv_adapter, tv_adapter) = match cfg.style {
            Some(dims) => {
                let tiv = TimeInvariantAdapter::new(store, "dec.tiv_adapter", dims.channels, c, rng)?;
                let mut tv = CrossAttentionAdapter::new(store, "dec.tv_adapter", c, dims.dim, rng)?;
                tv.scale_scores = cfg.scale_qk_adapter;
                tv.residual = cfg.adapter_residual;
                (Some(tiv), Some(tv))
            }
            None => (None, None),
        };
        let patchify = OverlapPatchify::new(store, "dec.patchify", c, cfg.patch, cfg.overlap, rng)?;
        let embed = PatchEmbedding::new(
            store,
            "dec.embed",
            cfg.embed_kind,
            c,
            cfg.freq_cells(),
            cfg.max_time_cells(),
            rng,
        )?;
        let mut dit = Vec::with_capacity(cfg.dit_blocks);
        for i in 0..cfg.dit_blocks {
            dit.push(DitBlock::new(
                store,
                &format!("dec.dit{i}"),
                c,
                cfg.dit_heads,
                c,
                cfg.mlp_mult,
                rng,
            )?);
        }
        let unpatch = Unpatchify::new(store, "dec.unpatch", c, cfg.patch, cfg.overlap, rng)?;
        let up_w = store.register("dec.up_w", init::conv_t(&[c, c, 2, 2], rng))?;
        let up_b = store.register("dec.up_b", init::zeros(&[c, 1, 1]))?;
        let up_res = ResBlock::new(store, "dec.up_res", c, rng)?;
        let out_w = store.register("dec.out_w", init::conv(&[1, c, 3, 3], rng))?;
        let out_b = store.register("dec.out_b", init::zeros(&[1, 1, 1]))?;
        Ok(Self {
            cfg,
            time,
            in_w,
            in_b,
            down_res,
            down_w,
            down_b,
            mid_res,
            tiv_adapter,
            tv_adapter,
            patchify,
            embed,
            dit,
            unpatch,
            up_w,
            up_b,
            up_res,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn patchify_layer(&self) -> &OverlapPatchify {
        &self.patchify
    }

    /// Pads an axis up to the next multiple of the down/patch unit by chained
    /// end reflections (each reflection can add at most extent−1 entries).
    fn pad_axis(&self, tape: &mut Tape, x: Var, axis: usize) -> Result<Var> {
        let unit = self.cfg.unit();
        let mut cur = x;
        loop {
            let extent = tape.shape(cur)[axis];
            let target = next_multiple(extent, unit);
            if target == extent {
                return Ok(cur);
            }
            let need = target - extent;
            let step = need.min(extent - 1);
            if step == 0 {
                return Err(Error::Input(format!(
                    "extent {extent} on axis {axis} is too short to reflect-pad"
                )));
            }
            cur = tape.pad_reflect_end(cur, axis, step)?;
        }
    }

    /// The raw network before preconditioning: takes the already-scaled noisy
    /// input, the aligner's mel representation, and the log-time code.
    pub fn raw(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_in: Var,
        cond_mel: Var,
        noise_code: f64,
        styles: Option<StyleRefs>,
    ) -> Result<Var> {
        let shape = tape.shape(x_in).to_vec();
        if shape.len() != 2 || shape[0] != self.cfg.mel_bins {
            return Err(Error::Shape(format!(
                "denoiser wants [{}×T], got {shape:?}",
                self.cfg.mel_bins
            )));
        }
        if tape.shape(cond_mel) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "conditioning shape {:?} differs from input {:?}",
                tape.shape(cond_mel),
                shape
            )));
        }
        if self.cfg.style.is_some() && styles.is_none() {
            return Err(Error::Contract(
                "style-conditioned decoder needs style inputs".into(),
            ));
        }
        let (f, t) = (shape[0], shape[1]);
        let c = self.cfg.hidden;

        let t_emb = self.time.embed(tape, store, noise_code)?;
        // the embedding enters as broadcast channels alongside x_t and the mel
        let t_col = tape.reshape(t_emb, &[c, 1, 1])?;
        let zeros = tape.constant(Tensor::zeros(&[c, f, t]))?;
        let t_chan = tape.broadcast_add(zeros, t_col)?;
        let x3 = tape.reshape(x_in, &[1, f, t])?;
        let m3 = tape.reshape(cond_mel, &[1, f, t])?;
        let stacked = tape.concat(&[x3, m3, t_chan], 0)?;
        let stacked = self.pad_axis(tape, stacked, 1)?;
        let stacked = self.pad_axis(tape, stacked, 2)?;

        let in_w = tape.param(store, self.in_w);
        let in_b = tape.param(store, self.in_b);
        let h = tape.conv2d(stacked, in_w, (1, 1), (1, 1))?;
        let mut h = tape.broadcast_add(h, in_b)?;

        h = self.down_res.forward(tape, store, h)?;
        let down_w = tape.param(store, self.down_w);
        let down_b = tape.param(store, self.down_b);
        h = tape.conv2d(h, down_w, (2, 2), (1, 1))?;
        h = tape.broadcast_add(h, down_b)?;
        h = self.mid_res.forward(tape, store, h)?;

        if let (Some(tiv), Some(tv), Some(s)) = (&self.tiv_adapter, &self.tv_adapter, styles) {
            h = tiv.apply(tape, store, h, s.level_maps, t_emb)?;
            h = tv.apply(tape, store, h, s.framewise)?;
        }

        let patched = self.patchify.apply(tape, store, h)?;
        let embedded = self.embed.apply(tape, store, patched)?;
        let pshape = tape.shape(embedded).to_vec();
        let (f2, t2) = (pshape[1], pshape[2]);
        let seq = tape.transpose(embedded, &[1, 2, 0])?;
        let mut seq = tape.reshape(seq, &[f2 * t2, c])?;
        for block in &self.dit {
            seq = block.forward(tape, store, seq, t_emb)?;
        }
        let grid = tape.reshape(seq, &[f2, t2, c])?;
        let grid = tape.transpose(grid, &[2, 0, 1])?;
        let mut h = self.unpatch.apply(tape, store, grid)?;

        let up_w = tape.param(store, self.up_w);
        let up_b = tape.param(store, self.up_b);
        h = tape.conv_transpose2d(h, up_w, (2, 2), (0, 0), (0, 0))?;
        h = tape.broadcast_add(h, up_b)?;
        h = self.up_res.forward(tape, store, h)?;
        let out_w = tape.param(store, self.out_w);
        let out_b = tape.param(store, self.out_b);
        let out = tape.conv2d(h, out_w, (1, 1), (1, 1))?;
        let out = tape.broadcast_add(out, out_b)?;
        let out = tape.slice_axis(out, 1, 0, f)?;
        let out = tape.slice_axis(out, 2, 0, t)?;
        tape.reshape(out, &[f, t])
    }

    /// Preconditioned denoiser: c_skip(t)·x_t + c_out(t)·raw(c_in(t)·x_t, ¼ln t).
    /// t = 0 is the exact identity; negative t violates the contract.
    pub fn denoise(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_t: Var,
        cond_mel: Var,
        t: f64,
        styles: Option<StyleRefs>,
        sched: &NoiseSchedule,
    ) -> Result<Var> {
        if t < 0.0 || !t.is_finite() {
            return Err(Error::Contract(format!("denoiser time {t} must be >= 0")));
        }
        if t == 0.0 {
            return Ok(x_t);
        }
        let scaled = tape.scale(x_t, sched.c_in(t))?;
        let f = self.raw(tape, store, scaled, cond_mel, sched.c_noise(t), styles)?;
        let skip = tape.scale(x_t, sched.c_skip(t))?;
        let refined = tape.scale(f, sched.c_out(t))?;
        tape.add(skip, refined)
    }

    /// λ(t)-weighted denoising error for one drawn (t, ε) pair. The caller
    /// supplies the draws so batches stay deterministic under threading.
    pub fn diffusion_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        target: &Tensor,
        cond_mel: Var,
        styles: Option<StyleRefs>,
        sched: &NoiseSchedule,
        t: f64,
        noise: &Tensor,
    ) -> Result<Var> {
        if noise.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "noise {:?} vs target {:?}",
                noise.shape(),
                target.shape()
            )));
        }
        let noisy: Vec<f64> = target
            .data()
            .iter()
            .zip(noise.data())
            .map(|(x, e)| x + t * e)
            .collect();
        let x_t = tape.constant(Tensor::new(target.shape().to_vec(), noisy)?)?;
        let denoised = self.denoise(tape, store, x_t, cond_mel, t, styles, sched)?;
        let target_v = tape.constant(target.clone())?;
        let err = tape.mse(denoised, target_v)?;
        tape.scale(err, sched.loss_weight(t))
    }

    /// Integrates the probability-flow ODE with nfe Euler steps from σ_max to
    /// 0. Each step rewrites x as (t_next/t)·x + (1 − t_next/t)·D(x, t), which
    /// is the Euler update rearranged so the final step lands exactly on the
    /// denoiser output.
    pub fn sample_euler<R: Rng>(
        &self,
        store: &ParamStore,
        cond_mel: &Tensor,
        styles: Option<&StyleTensors>,
        sched: &NoiseSchedule,
        nfe: usize,
        rng: &mut R,
        mut trace: Option<&mut Vec<TraceRow>>,
    ) -> Result<Tensor> {
        let grid = sched.time_grid(nfe)?;
        let shape = cond_mel.shape().to_vec();
        let mut x = Tensor::zeros(&shape);
        for (x, m) in x.data_mut().iter_mut().zip(cond_mel.data()) {
            let z: f64 = rng.sample(StandardNormal);
            *x = sched.sigma_max * z + if self.cfg.mean_shift_prior { *m } else { 0.0 };
        }
        for i in 0..nfe {
            let (t, t_next) = (grid[i], grid[i + 1]);
            let denoised = {
                let mut tape = Tape::new();
                let x_v = tape.constant(x.clone())?;
                let cond = tape.constant(cond_mel.clone())?;
                let style_refs = match styles {
                    Some(s) => Some(StyleRefs {
                        level_maps: tape.constant(s.level_maps.clone())?,
                        framewise: tape.constant(s.framewise.clone())?,
                    }),
                    None => None,
                };
                let d = self.denoise(&mut tape, store, x_v, cond, t, style_refs, sched)?;
                tape.value(d).clone()
            };
            if let Some(rows) = trace.as_deref_mut() {
                let residual: f64 = denoised
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(d, x)| (d - x) * (d - x))
                    .sum::<f64>()
                    .sqrt();
                rows.push(TraceRow {
                    step: i,
                    time: t,
                    state_norm: x.l2_norm(),
                    residual_norm: residual,
                });
            }
            let ratio = t_next / t;
            for (x, d) in x.data_mut().iter_mut().zip(denoised.data()) {
                *x = ratio * *x + (1.0 - ratio) * d;
            }
        }
        if !x.all_finite() {
            return Err(Error::Numeric("sampler produced non-finite values".into()));
        }
        Ok(x)
    }
}
