//! Reference-speech style extraction. The time-invariant encoder stacks the
//! instance-normalized output of every residual conv block into multi-level
//! feature maps; the time-variant encoder uses layer normalization instead,
//! plus a pitch GRU and a vector-quantized branch whose codebook learns by
//! exponential moving averages.

use crate::error::{Error, Result};
use crate::tensor::{NormKind, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{init, NORM_EPS};
use rand_chacha::ChaCha8Rng;

/// All conditioning representations extracted from one reference, live on the
/// current tape. `framewise` carries the quantized rows plus projected pitch;
/// `quantized` exposes the pre-pitch rows, which are exact codebook entries.
pub struct StyleVars {
    pub level_maps: Var,
    pub pooled: Var,
    pub framewise: Var,
    pub quantized: Var,
    pub codes: Vec<usize>,
    pub commit_loss: Var,
    /// Values entering the quantizer, kept for the EMA codebook update.
    pub pre_quant: Tensor,
}

/// Value-level copy of the decoder-facing style inputs, detached from any
/// tape; samplers re-inject these as constants on each step's fresh tape.
#[derive(Clone, Debug)]
pub struct StyleTensors {
    pub level_maps: Tensor,
    pub framewise: Tensor,
}

impl StyleVars {
    pub fn snapshot(&self, tape: &Tape) -> StyleTensors {
        StyleTensors {
            level_maps: tape.value(self.level_maps).clone(),
            framewise: tape.value(self.framewise).clone(),
        }
    }
}

/// Discrete latent codebook with EMA statistics for its row updates.
pub struct Codebook {
    rows: ParamId,
    ema_count: ParamId,
    ema_sum: ParamId,
    pub decay: f64,
    size: usize,
    dim: usize,
}

/// Output of one quantization call.
pub struct VqOutput {
    /// Straight-through node: codebook rows forward, identity gradient back.
    pub quantized: Var,
    pub codes: Vec<usize>,
    /// mean ‖h − sg(e)‖², the commitment term.
    pub commit_loss: Var,
}

impl Codebook {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        size: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Config("codebook extents must be positive".into()));
        }
        let rows_t = Tensor::randn(&[size, dim], 1.0, rng);
        let ema_sum_t = rows_t.clone();
        let rows = store.register(&format!("{prefix}.rows"), rows_t)?;
        let ema_count = store.register(&format!("{prefix}.ema_count"), init::zeros(&[size]))?;
        let ema_sum = store.register(&format!("{prefix}.ema_sum"), ema_sum_t)?;
        Ok(Self {
            rows,
            ema_count,
            ema_sum,
            decay: 0.99,
            size,
            dim,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Index of the closest row under Euclidean distance.
    fn nearest(&self, store: &ParamStore, row: &[f64]) -> usize {
        let table = store.value(self.rows).data();
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size {
            let mut d = 0.0;
            for j in 0..self.dim {
                let diff = table[k * self.dim + j] - row[j];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Maps each input row to its nearest codebook row. The forward value is
    /// the selected rows bit-for-bit; the gradient passes straight through to
    /// the input. The commitment loss pulls inputs toward their rows through
    /// the stop-gradient.
    pub fn quantize(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<VqOutput> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Shape(format!(
                "quantize wants [T×{}], got {shape:?}",
                self.dim
            )));
        }
        let rows = shape[0];
        let mut codes = Vec::with_capacity(rows);
        {
            let hv = tape.value(h).data();
            for r in 0..rows {
                codes.push(self.nearest(store, &hv[r * self.dim..(r + 1) * self.dim]));
            }
        }
        self.quantize_with_codes(tape, store, h, &codes)
    }

    /// [`Codebook::quantize`] with the row selection supplied by the caller.
    /// Used where the discrete assignment must stay fixed, e.g. when checking
    /// gradients of the surrounding loss against finite differences.
    pub fn quantize_with_codes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        codes: &[usize],
    ) -> Result<VqOutput> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != self.dim || shape[0] != codes.len() {
            return Err(Error::Shape(format!(
                "quantize wants [{}×{}], got {shape:?}",
                codes.len(),
                self.dim
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&k| k >= self.size) {
            return Err(Error::Input(format!("code {bad} outside codebook of {}", self.size)));
        }
        let table = store.value(self.rows);
        let mut selected = Vec::with_capacity(codes.len() * self.dim);
        for &k in codes {
            selected.extend_from_slice(&table.data()[k * self.dim..(k + 1) * self.dim]);
        }
        let selected = Tensor::new(vec![codes.len(), self.dim], selected)?;
        let frozen = tape.constant(selected.clone())?;
        let quantized = tape.straight_through(h, selected)?;
        let diff = tape.sub(h, frozen)?;
        let sq = tape.mul(diff, diff)?;
        let commit_loss = tape.mean_all(sq)?;
        Ok(VqOutput {
            quantized,
            codes: codes.to_vec(),
            commit_loss,
        })
    }

    /// EMA update of counts, sums and rows from one batch of assignments.
    /// Laplace smoothing keeps dead rows from collapsing to zero.
    pub fn ema_update(
        &self,
        store: &mut ParamStore,
        inputs: &Tensor,
        codes: &[usize],
    ) -> Result<()> {
        if inputs.rank() != 2 || inputs.shape()[1] != self.dim || inputs.shape()[0] != codes.len() {
            return Err(Error::Shape(format!(
                "ema_update inputs {:?} vs {} codes",
                inputs.shape(),
                codes.len()
            )));
        }
        let mut counts = vec![0.0f64; self.size];
        let mut sums = vec![0.0f64; self.size * self.dim];
        for (r, &k) in codes.iter().enumerate() {
            counts[k] += 1.0;
            for j in 0..self.dim {
                sums[k * self.dim + j] += inputs.data()[r * self.dim + j];
            }
        }
        let decay = self.decay;
        {
            let count = store.value_mut(self.ema_count);
            for (c, new) in count.data_mut().iter_mut().zip(&counts) {
                *c = decay * *c + (1.0 - decay) * new;
            }
        }
        {
            let sum = store.value_mut(self.ema_sum);
            for (s, new) in sum.data_mut().iter_mut().zip(&sums) {
                *s = decay * *s + (1.0 - decay) * new;
            }
        }
        let total: f64 = store.value(self.ema_count).data().iter().sum();
        if total <= 0.0 {
            return Ok(());
        }
        let eps = 1e-5;
        let count = store.value(self.ema_count).data().to_vec();
        let sums = store.value(self.ema_sum).data().to_vec();
        let rows = store.value_mut(self.rows);
        for k in 0..self.size {
            let smoothed = (count[k] + eps) / (total + self.size as f64 * eps) * total;
            for j in 0..self.dim {
                rows.data_mut()[k * self.dim + j] = sums[k * self.dim + j] / smoothed;
            }
        }
        Ok(())
    }

    pub fn rows_param(&self) -> ParamId {
        self.rows
    }
}

/// Single-layer GRU over the scalar log-F0 track, returning the full hidden
/// sequence. Gate order in the fused weights is (reset, update, candidate).
pub struct PitchEncoder {
    w_in: ParamId,
    b_in: ParamId,
    w_h: ParamId,
    b_h: ParamId,
    width: usize,
}

impl PitchEncoder {
    pub fn new(store: &mut ParamStore, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w_in: store.register("pitch.w_in", Tensor::randn(&[1, 3 * width], 1.0, rng))?,
            b_in: store.register("pitch.b_in", init::zeros(&[1, 3 * width]))?,
            w_h: store.register("pitch.w_h", init::linear(&[width, 3 * width], rng))?,
            b_h: store.register("pitch.b_h", init::zeros(&[1, 3 * width]))?,
            width,
        })
    }

    /// Runs the recurrence over `log_f0` (unvoiced frames conventionally 0).
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, log_f0: &Tensor) -> Result<Var> {
        if log_f0.rank() != 1 {
            return Err(Error::Shape(format!(
                "pitch track must be rank 1, got {:?}",
                log_f0.shape()
            )));
        }
        if !log_f0.all_finite() {
            return Err(Error::Input("non-finite pitch track".into()));
        }
        let c = self.width;
        let w_in = tape.param(store, self.w_in);
        let b_in = tape.param(store, self.b_in);
        let w_h = tape.param(store, self.w_h);
        let b_h = tape.param(store, self.b_h);
        let mut h = tape.constant(Tensor::zeros(&[1, c]))?;
        let mut outputs = Vec::with_capacity(log_f0.numel());
        for &x_t in log_f0.data() {
            let gx = tape.scale(w_in, x_t)?;
            let gx = tape.add(gx, b_in)?;
            let gh = tape.linear(h, w_h, b_h)?;
            let gx_r = tape.slice_axis(gx, 1, 0, c)?;
            let gx_z = tape.slice_axis(gx, 1, c, c)?;
            let gx_n = tape.slice_axis(gx, 1, 2 * c, c)?;
            let gh_r = tape.slice_axis(gh, 1, 0, c)?;
            let gh_z = tape.slice_axis(gh, 1, c, c)?;
            let gh_n = tape.slice_axis(gh, 1, 2 * c, c)?;
            let r_in = tape.add(gx_r, gh_r)?;
            let reset = tape.sigmoid(r_in)?;
            let z_in = tape.add(gx_z, gh_z)?;
            let update = tape.sigmoid(z_in)?;
            let gated = tape.mul(reset, gh_n)?;
            let n_in = tape.add(gx_n, gated)?;
            let candidate = tape.tanh(n_in)?;
            let keep = tape.mul(update, h)?;
            let negz = tape.scale(update, -1.0)?;
            let one_minus = tape.add_scalar(negz, 1.0)?;
            let fresh = tape.mul(one_minus, candidate)?;
            h = tape.add(keep, fresh)?;
            outputs.push(h);
        }
        tape.concat(&outputs, 0)
    }
}

/// Residual 1-D conv stack over time. `time_major_norm` picks instance
/// normalization (per channel across time) or per-frame layer normalization.
struct ConvStack {
    in_w: ParamId,
    in_b: ParamId,
    blocks: Vec<(ParamId, ParamId)>,
    instance_norm: bool,
}

impl ConvStack {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        mel_bins: usize,
        width: usize,
        depth: usize,
        instance_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let in_w = store.register(&format!("{prefix}.in_w"), init::conv(&[width, mel_bins, 3], rng))?;
        let in_b = store.register(&format!("{prefix}.in_b"), init::zeros(&[width, 1]))?;
        let mut blocks = Vec::with_capacity(depth);
        for l in 0..depth {
            blocks.push((
                store.register(&format!("{prefix}.block{l}_w"), init::conv(&[width, width, 3], rng))?,
                store.register(&format!("{prefix}.block{l}_b"), init::zeros(&[width, 1]))?,
            ));
        }
        Ok(Self {
            in_w,
            in_b,
            blocks,
            instance_norm,
        })
    }

    fn norm(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.instance_norm {
            tape.normalize(x, NormKind::Instance, NORM_EPS)
        } else {
            // per time position over channels
            let t = tape.transpose2(x)?;
            let n = tape.normalize(t, NormKind::Layer, NORM_EPS)?;
            tape.transpose2(n)
        }
    }

    /// Returns the post-normalization output of every block.
    fn forward_levels(&self, tape: &mut Tape, store: &ParamStore, mel: Var) -> Result<Vec<Var>> {
        let w = tape.param(store, self.in_w);
        let b = tape.param(store, self.in_b);
        let y = tape.conv1d(mel, w, 1, 1)?;
        let y = tape.broadcast_add(y, b)?;
        let mut x = tape.swish(y)?;
        let mut levels = Vec::with_capacity(self.blocks.len());
        for (w, b) in &self.blocks {
            let wv = tape.param(store, *w);
            let bv = tape.param(store, *b);
            let y = tape.conv1d(x, wv, 1, 1)?;
            let y = tape.broadcast_add(y, bv)?;
            let y = tape.swish(y)?;
            let res = tape.add(x, y)?;
            x = self.norm(tape, res)?;
            levels.push(x);
        }
        Ok(levels)
    }
}

/// Multi-level instance-normalized reference encoder; its stacked per-layer
/// maps feed the adaptive-instance-norm adapter.
pub struct TimeInvariantEncoder {
    stack: ConvStack,
    width: usize,
}

impl TimeInvariantEncoder {
    pub fn new(
        store: &mut ParamStore,
        mel_bins: usize,
        width: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            stack: ConvStack::new(store, "tiv_enc", mel_bins, width, depth, true, rng)?,
            width,
        })
    }

    /// Stacks every block's post-norm map into [L×C×T_ref].
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, mel: Var) -> Result<Var> {
        let shape = tape.shape(mel).to_vec();
        if shape.len() != 2 {
            return Err(Error::Input(format!("reference mel must be [F×T], got {shape:?}")));
        }
        let t = shape[1];
        let levels = self.stack.forward_levels(tape, store, mel)?;
        let mut stacked = Vec::with_capacity(levels.len());
        for lvl in levels {
            stacked.push(tape.reshape(lvl, &[1, self.width, t])?);
        }
        tape.concat(&stacked, 0)
    }
}

/// Layer-normalized reference encoder feeding both the pooled style vector
/// (text-encoder conditioning) and the quantized per-frame styles (decoder
/// cross-attention conditioning).
pub struct TimeVariantEncoder {
    stack: ConvStack,
    pre_vq_w: ParamId,
    pre_vq_b: ParamId,
    pitch_proj_w: ParamId,
    pitch_proj_b: ParamId,
    width: usize,
}

impl TimeVariantEncoder {
    pub fn new(
        store: &mut ParamStore,
        mel_bins: usize,
        width: usize,
        depth: usize,
        code_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            stack: ConvStack::new(store, "tv_enc", mel_bins, width, depth, false, rng)?,
            pre_vq_w: store.register("tv_enc.pre_vq_w", init::linear(&[width, code_dim], rng))?,
            pre_vq_b: store.register("tv_enc.pre_vq_b", init::zeros(&[1, code_dim]))?,
            pitch_proj_w: store.register("tv_enc.pitch_proj_w", init::linear(&[width, code_dim], rng))?,
            pitch_proj_b: store.register("tv_enc.pitch_proj_b", init::zeros(&[1, code_dim]))?,
            width,
        })
    }

    /// Branch A: conv features plus pitch, mean-pooled over time → [1×C].
    /// Branch B: conv features projected, quantized, plus projected pitch,
    /// keeping the time axis → [T_ref×D].
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mel: Var,
        pitch_seq: Var,
        codebook: &Codebook,
        pinned_codes: Option<&[usize]>,
    ) -> Result<(Var, Var, VqOutput, Tensor)> {
        let shape = tape.shape(mel).to_vec();
        if shape.len() != 2 {
            return Err(Error::Input(format!("reference mel must be [F×T], got {shape:?}")));
        }
        let frames = shape[1];
        if tape.shape(pitch_seq) != [frames, self.width] {
            return Err(Error::Shape(format!(
                "pitch sequence {:?} vs {} frames of width {}",
                tape.shape(pitch_seq),
                frames,
                self.width
            )));
        }
        let levels = self.stack.forward_levels(tape, store, mel)?;
        let base = *levels.last().expect("stack has at least one block");

        let pitch_cm = tape.transpose2(pitch_seq)?; // [C×T]
        let with_pitch = tape.add(base, pitch_cm)?;
        let pooled = tape.mean_axis(with_pitch, 1)?; // [C×1]
        let pooled = tape.transpose2(pooled)?; // [1×C]

        let frame_major = tape.transpose2(base)?; // [T×C]
        let w = tape.param(store, self.pre_vq_w);
        let b = tape.param(store, self.pre_vq_b);
        let pre_vq = tape.linear(frame_major, w, b)?; // [T×D]
        let pre_snapshot = tape.value(pre_vq).clone();
        let vq = match pinned_codes {
            Some(codes) => codebook.quantize_with_codes(tape, store, pre_vq, codes)?,
            None => codebook.quantize(tape, store, pre_vq)?,
        };
        let pw = tape.param(store, self.pitch_proj_w);
        let pb = tape.param(store, self.pitch_proj_b);
        let pitch_proj = tape.linear(pitch_seq, pw, pb)?; // [T×D]
        let framewise = tape.add(vq.quantized, pitch_proj)?;
        Ok((pooled, framewise, vq, pre_snapshot))
    }
}

/// Both style encoders plus the pitch GRU and the shared codebook.
pub struct StyleEncoders {
    pub tiv: TimeInvariantEncoder,
    pub tv: TimeVariantEncoder,
    pub pitch: PitchEncoder,
    pub codebook: Codebook,
}

impl StyleEncoders {
    pub fn new(
        store: &mut ParamStore,
        mel_bins: usize,
        width: usize,
        depth: usize,
        code_size: usize,
        code_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            tiv: TimeInvariantEncoder::new(store, mel_bins, width, depth, rng)?,
            tv: TimeVariantEncoder::new(store, mel_bins, width, depth, code_dim, rng)?,
            pitch: PitchEncoder::new(store, width, rng)?,
            codebook: Codebook::new(store, "vq", code_size, code_dim, rng)?,
        })
    }

    /// Extracts every conditioning representation from one reference.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mel: &Tensor,
        log_f0: &Tensor,
    ) -> Result<StyleVars> {
        self.encode_with(tape, store, mel, log_f0, None)
    }

    /// [`StyleEncoders::encode`] with the quantizer row selection pinned.
    pub fn encode_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mel: &Tensor,
        log_f0: &Tensor,
        pinned_codes: Option<&[usize]>,
    ) -> Result<StyleVars> {
        if mel.rank() != 2 {
            return Err(Error::Input(format!(
                "reference mel must be [F×T], got {:?}",
                mel.shape()
            )));
        }
        if log_f0.numel() != mel.shape()[1] {
            return Err(Error::Input(format!(
                "pitch track has {} frames, mel has {}",
                log_f0.numel(),
                mel.shape()[1]
            )));
        }
        let mel_v = tape.constant(mel.clone())?;
        let pitch_seq = self.pitch.encode(tape, store, log_f0)?;
        let level_maps = self.tiv.encode(tape, store, mel_v)?;
        let (pooled, framewise, vq, pre_quant) =
            self.tv
                .encode(tape, store, mel_v, pitch_seq, &self.codebook, pinned_codes)?;
        Ok(StyleVars {
            level_maps,
            pooled,
            framewise,
            quantized: vq.quantized,
            codes: vq.codes,
            commit_loss: vq.commit_loss,
            pre_quant,
        })
    }
}
