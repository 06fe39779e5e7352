//! Patch extraction and positional embedding for the transformer stage.
//!
//! Patchify uses a convolution whose kernel (2P−1 at stride P) lets adjacent
//! patches share P−1 input columns, so no patch boundary is invisible to the
//! network. The default embedding derives its time component from the content
//! (a convolution averaged over frequency) and keeps only the frequency axis
//! as learned parameters, so any utterance length works; the alternative
//! embeddings exist for the ablation harness.

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Convolutional patch extraction; `overlap` picks kernel 2P−1 (shared
/// columns) versus kernel P (disjoint patches).
pub struct OverlapPatchify {
    weight: ParamId,
    bias: ParamId,
    patch: usize,
    overlap: bool,
}

impl OverlapPatchify {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        patch: usize,
        overlap: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        let k = if overlap { 2 * patch - 1 } else { patch };
        Ok(Self {
            weight: store.register(
                &format!("{prefix}.weight"),
                init::conv(&[channels, channels, k, k], rng),
            )?,
            bias: store.register(&format!("{prefix}.bias"), init::zeros(&[channels, 1, 1]))?,
            patch,
            overlap,
        })
    }

    pub fn kernel_size(&self) -> usize {
        if self.overlap {
            2 * self.patch - 1
        } else {
            self.patch
        }
    }

    pub fn stride(&self) -> usize {
        self.patch
    }

    pub fn padding(&self) -> usize {
        if self.overlap {
            self.patch - 1
        } else {
            0
        }
    }

    /// [C×F×T] → [C×F/P×T/P]; both extents must already be multiples of P.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("patchify wants [C×F×T], got {shape:?}")));
        }
        if shape[1] % self.patch != 0 || shape[2] % self.patch != 0 {
            return Err(Error::Shape(format!(
                "extents {:?} not divisible by patch {}",
                &shape[1..],
                self.patch
            )));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let p = self.padding();
        let y = tape.conv2d(x, w, (self.patch, self.patch), (p, p))?;
        tape.broadcast_add(y, b)
    }
}

/// Inverse of [`OverlapPatchify`]: a transposed convolution with the same
/// kernel and stride restoring the pre-patch resolution.
pub struct Unpatchify {
    weight: ParamId,
    bias: ParamId,
    patch: usize,
    overlap: bool,
}

impl Unpatchify {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        patch: usize,
        overlap: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let k = if overlap { 2 * patch - 1 } else { patch };
        Ok(Self {
            weight: store.register(
                &format!("{prefix}.weight"),
                init::conv_t(&[channels, channels, k, k], rng),
            )?,
            bias: store.register(&format!("{prefix}.bias"), init::zeros(&[channels, 1, 1]))?,
            patch,
            overlap,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let p = if self.overlap { self.patch - 1 } else { 0 };
        let y = tape.conv_transpose2d(x, w, (self.patch, self.patch), (p, p), (p, p))?;
        tape.broadcast_add(y, b)
    }
}

/// How patch positions are communicated to the transformer blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchEmbedKind {
    /// Content-derived time embedding (convolution averaged over frequency)
    /// plus learned frequency rows; handles any utterance length.
    ConvFreq,
    /// Fixed sinusoidal grid on both axes.
    SinCos,
    /// Learned parameters on both axes; fails beyond the trained time extent.
    TimeFreq,
    /// Sinusoidal time, learned frequency rows.
    PosFreq,
}

impl std::fmt::Display for PatchEmbedKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PatchEmbedKind::ConvFreq => "conv-freq",
            PatchEmbedKind::SinCos => "sin-cos",
            PatchEmbedKind::TimeFreq => "time-freq",
            PatchEmbedKind::PosFreq => "pos-freq",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PatchEmbedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv-freq" => Ok(PatchEmbedKind::ConvFreq),
            "sin-cos" => Ok(PatchEmbedKind::SinCos),
            "time-freq" => Ok(PatchEmbedKind::TimeFreq),
            "pos-freq" => Ok(PatchEmbedKind::PosFreq),
            other => Err(Error::Input(format!("unknown embedding kind `{other}`"))),
        }
    }
}

pub struct PatchEmbedding {
    kind: PatchEmbedKind,
    conv: Option<(ParamId, ParamId)>,
    freq_rows: Option<ParamId>,
    time_rows: Option<ParamId>,
    channels: usize,
    freq_cells: usize,
    max_time_cells: usize,
}

impl PatchEmbedding {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: PatchEmbedKind,
        channels: usize,
        freq_cells: usize,
        max_time_cells: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if matches!(kind, PatchEmbedKind::SinCos | PatchEmbedKind::PosFreq) && channels % 2 != 0 {
            return Err(Error::Config(format!(
                "sinusoidal embeddings need an even channel count, got {channels}"
            )));
        }
        let learned_freq = !matches!(kind, PatchEmbedKind::SinCos);
        let conv = if kind == PatchEmbedKind::ConvFreq {
            Some((
                store.register(
                    &format!("{prefix}.conv_w"),
                    init::conv(&[channels, channels, 3, 3], rng),
                )?,
                store.register(&format!("{prefix}.conv_b"), init::zeros(&[channels, 1, 1]))?,
            ))
        } else {
            None
        };
        let freq_rows = if learned_freq {
            Some(store.register(
                &format!("{prefix}.freq_rows"),
                Tensor::randn(&[channels, freq_cells], 0.02, rng),
            )?)
        } else {
            None
        };
        let time_rows = if kind == PatchEmbedKind::TimeFreq {
            Some(store.register(
                &format!("{prefix}.time_rows"),
                Tensor::randn(&[channels, max_time_cells], 0.02, rng),
            )?)
        } else {
            None
        };
        Ok(Self {
            kind,
            conv,
            freq_rows,
            time_rows,
            channels,
            freq_cells,
            max_time_cells,
        })
    }

    pub fn kind(&self) -> PatchEmbedKind {
        self.kind
    }

    fn add_freq_rows(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let rows = tape.param(store, self.freq_rows.expect("learned frequency rows"));
        let rows = tape.reshape(rows, &[self.channels, self.freq_cells, 1])?;
        tape.broadcast_add(x, rows)
    }

    /// Adds the positional information to patched features [C×F₂×T₂].
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::Shape(format!(
                "patch embedding wants [{}×F₂×T₂], got {shape:?}",
                self.channels
            )));
        }
        if shape[1] != self.freq_cells {
            return Err(Error::Config(format!(
                "frequency extent {} does not match the configured {}",
                shape[1], self.freq_cells
            )));
        }
        let time_cells = shape[2];
        match self.kind {
            PatchEmbedKind::ConvFreq => {
                let (w, b) = self.conv.expect("conv weights");
                let wv = tape.param(store, w);
                let bv = tape.param(store, b);
                // replicate padding keeps the time embedding constant for
                // time-constant content, which zero padding would break at
                // the boundaries
                let padded = tape.pad_axis(x, 1, 1, 1, crate::tensor::PadMode::Replicate)?;
                let padded = tape.pad_axis(padded, 2, 1, 1, crate::tensor::PadMode::Replicate)?;
                let conv = tape.conv2d(padded, wv, (1, 1), (0, 0))?;
                let conv = tape.broadcast_add(conv, bv)?;
                // average over the frequency axis: one embedding per time cell
                let time_embed = tape.mean_axis(conv, 1)?; // [C×1×T₂]
                let with_time = tape.broadcast_add(x, time_embed)?;
                self.add_freq_rows(tape, store, with_time)
            }
            PatchEmbedKind::SinCos => {
                let grid = sincos_grid(self.channels, self.freq_cells, time_cells);
                let grid = tape.constant(grid)?;
                tape.add(x, grid)
            }
            PatchEmbedKind::TimeFreq => {
                if time_cells > self.max_time_cells {
                    return Err(Error::Extent(format!(
                        "time extent {time_cells} exceeds trained extent {}",
                        self.max_time_cells
                    )));
                }
                let rows = tape.param(store, self.time_rows.expect("learned time rows"));
                let rows = tape.slice_axis(rows, 1, 0, time_cells)?;
                let rows = tape.reshape(rows, &[self.channels, 1, time_cells])?;
                let with_time = tape.broadcast_add(x, rows)?;
                self.add_freq_rows(tape, store, with_time)
            }
            PatchEmbedKind::PosFreq => {
                let time = sinusoid_rows(self.channels, time_cells);
                let time = Tensor::new(vec![self.channels, 1, time_cells], time.data().to_vec())?;
                let time = tape.constant(time)?;
                let with_time = tape.broadcast_add(x, time)?;
                self.add_freq_rows(tape, store, with_time)
            }
        }
    }
}

/// Interleaved (sin, cos) rows: entry (2j, pos) = sin(pos·ω_j),
/// (2j+1, pos) = cos(pos·ω_j) with ω_j = 10000^(−2j/C). Shape [C×P].
pub(crate) fn sinusoid_rows(channels: usize, positions: usize) -> Tensor {
    let mut out = Tensor::zeros(&[channels, positions]);
    for j in 0..channels / 2 {
        let omega = 10000f64.powf(-2.0 * j as f64 / channels as f64);
        for p in 0..positions {
            let (s, c) = (p as f64 * omega).sin_cos();
            out.data_mut()[(2 * j) * positions + p] = s;
            out.data_mut()[(2 * j + 1) * positions + p] = c;
        }
    }
    out
}

/// Fixed two-axis grid: the first half of the channels encodes the frequency
/// cell, the second half the time cell.
fn sincos_grid(channels: usize, freq_cells: usize, time_cells: usize) -> Tensor {
    let half = channels / 2;
    let freq = sinusoid_rows(half, freq_cells);
    let time = sinusoid_rows(half, time_cells);
    let mut out = Tensor::zeros(&[channels, freq_cells, time_cells]);
    for c in 0..half {
        for f in 0..freq_cells {
            for t in 0..time_cells {
                out.data_mut()[(c * freq_cells + f) * time_cells + t] = freq.data()[c * freq_cells + f];
                out.data_mut()[((half + c) * freq_cells + f) * time_cells + t] =
                    time.data()[c * time_cells + t];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn patchify_unit_patch_is_spatial_identity_shape() {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let p = OverlapPatchify::new(&mut store, "patch", 2, 1, true, &mut r).unwrap();
        assert_eq!(p.kernel_size(), 1);
        assert_eq!(p.stride(), 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 4, 6], 1.0, &mut r)).unwrap();
        let y = p.apply(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 6]);
    }

    #[test]
    fn patchify_paper_shape_example() {
        // P = 2 ⇒ kernel 3, stride 2; 64×16×32 → 64×8×16
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let p = OverlapPatchify::new(&mut store, "patch", 64, 2, true, &mut r).unwrap();
        assert_eq!(p.kernel_size(), 3);
        assert_eq!(p.stride(), 2);
        assert_eq!(p.padding(), 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[64, 16, 32])).unwrap();
        let y = p.apply(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[64, 8, 16]);
    }

    #[test]
    fn patchify_kernel_and_stride_across_patch_sizes() {
        let mut r = rng(3);
        for patch in [1usize, 2, 4] {
            let mut store = ParamStore::new();
            let p = OverlapPatchify::new(&mut store, "patch", 2, patch, true, &mut r).unwrap();
            assert_eq!(p.kernel_size(), 2 * patch - 1);
            assert_eq!(p.stride(), patch);
            let np = OverlapPatchify::new(&mut store, "plain", 2, patch, false, &mut r).unwrap();
            assert_eq!(np.kernel_size(), patch);
            assert_eq!(np.stride(), patch);
        }
    }

    #[test]
    fn impulse_response_matches_analytic_overlap_footprint() {
        let mut r = rng(4);
        for patch in [2usize, 4] {
            let mut store = ParamStore::new();
            let p = OverlapPatchify::new(&mut store, "patch", 1, patch, true, &mut r).unwrap();
            // all-ones kernel so every reachable cell lights up
            let k = p.kernel_size();
            store
                .set_value(store.id_of("patch.weight").unwrap(), Tensor::filled(&[1, 1, k, k], 1.0))
                .unwrap();
            let cols = 4 * patch;
            for j in 0..cols {
                let mut impulse = Tensor::zeros(&[1, patch, cols]);
                impulse.data_mut()[j] = 1.0; // row 0, column j
                let mut tape = Tape::new();
                let x = tape.constant(impulse).unwrap();
                let y = p.apply(&mut tape, &store, x).unwrap();
                let t2 = cols / patch;
                let out_row = &tape.value(y).data()[0..t2];
                let touched: Vec<usize> = (0..t2).filter(|&i| out_row[i] != 0.0).collect();
                // analytic footprint: cells whose center column i·P is within
                // P−1 of the impulse column
                let expected: Vec<usize> = (0..t2)
                    .filter(|&i| {
                        let center = (i * patch) as isize;
                        (center - j as isize).abs() <= (patch - 1) as isize
                    })
                    .collect();
                assert_eq!(touched, expected, "patch {patch}, column {j}");
            }
        }
    }

    #[test]
    fn neighboring_cells_share_exactly_patch_minus_one_columns() {
        for patch in [2usize, 3, 4] {
            let k = 2 * patch - 1;
            let pad = patch - 1;
            // receptive field of output cell i covers columns [i·P − pad, i·P − pad + k)
            let field = |i: usize| {
                let lo = (i * patch) as isize - pad as isize;
                (lo, lo + k as isize)
            };
            let (_, hi0) = field(0);
            let (lo1, _) = field(1);
            let shared = (hi0 - lo1).max(0);
            assert_eq!(shared as usize, patch - 1);
        }
    }

    #[test]
    fn unpatchify_restores_pre_patch_resolution() {
        let mut r = rng(5);
        for (patch, overlap) in [(1usize, true), (2, true), (4, true), (2, false)] {
            let mut store = ParamStore::new();
            let down = OverlapPatchify::new(&mut store, "down", 3, patch, overlap, &mut r).unwrap();
            let up = Unpatchify::new(&mut store, "up", 3, patch, overlap, &mut r).unwrap();
            let (f, t) = (2 * patch, 6 * patch);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[3, f, t], 1.0, &mut r)).unwrap();
            let small = down.apply(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(small), &[3, f / patch, t / patch]);
            let big = up.apply(&mut tape, &store, small).unwrap();
            assert_eq!(tape.shape(big), &[3, f, t]);
        }
    }

    #[test]
    fn conv_freq_zeroed_parameters_pass_input_through() {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let emb = PatchEmbedding::new(&mut store, "embed", PatchEmbedKind::ConvFreq, 3, 4, 8, &mut r).unwrap();
        for name in ["embed.conv_w", "embed.freq_rows"] {
            let id = store.id_of(name).unwrap();
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 4, 5], 1.0, &mut r)).unwrap();
        let y = emb.apply(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_freq_handles_any_time_extent_with_the_same_parameters() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let emb = PatchEmbedding::new(&mut store, "embed", PatchEmbedKind::ConvFreq, 4, 4, 8, &mut r).unwrap();
        for t2 in [5usize, 50] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[4, 4, t2], 1.0, &mut r)).unwrap();
            let y = emb.apply(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(y), &[4, 4, t2]);
        }
        // wrong frequency extent is a config error
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 5, 6])).unwrap();
        assert!(matches!(emb.apply(&mut tape, &store, x), Err(Error::Config(_))));
    }

    #[test]
    fn conv_freq_time_embedding_tracks_content() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let emb = PatchEmbedding::new(&mut store, "embed", PatchEmbedKind::ConvFreq, 3, 4, 8, &mut r).unwrap();
        // silence the frequency rows so only the time component remains
        let id = store.id_of("embed.freq_rows").unwrap();
        store.set_value(id, Tensor::zeros(&[3, 4])).unwrap();

        // time-constant input ⇒ identical embedding along time
        let mut tape = Tape::new();
        let mut flat = Tensor::zeros(&[3, 4, 6]);
        for c in 0..3 {
            for f in 0..4 {
                for t in 0..6 {
                    flat.data_mut()[(c * 4 + f) * 6 + t] = (c * 4 + f) as f64 * 0.1;
                }
            }
        }
        let x = tape.constant(flat).unwrap();
        let y = emb.apply(&mut tape, &store, x).unwrap();
        let delta_flat = {
            let d = tape.sub(y, x).unwrap();
            tape.value(d).clone()
        };
        for c in 0..3 {
            for f in 0..4 {
                let row = &delta_flat.data()[(c * 4 + f) * 6..(c * 4 + f) * 6 + 6];
                for v in row {
                    assert!((v - row[0]).abs() <= 1e-12, "time-constant input must give a constant embedding");
                }
            }
        }

        // time-varying input ⇒ the embedding varies along time
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 4, 6], 1.0, &mut r)).unwrap();
        let y = emb.apply(&mut tape, &store, x).unwrap();
        let d = tape.sub(y, x).unwrap();
        let delta = tape.value(d);
        let varies = (0..3).any(|c| {
            (0..4).any(|f| {
                let row = &delta.data()[(c * 4 + f) * 6..(c * 4 + f) * 6 + 6];
                row.iter().any(|v| (v - row[0]).abs() > 1e-9)
            })
        });
        assert!(varies);
    }

    #[test]
    fn sincos_position_zero_starts_with_zero_one_pattern() {
        let rows = sinusoid_rows(4, 3);
        // channel 0 = sin at ω_0=1, channel 1 = cos: position 0 gives (0, 1)
        assert_eq!(rows.at(&[0, 0]), 0.0);
        assert_eq!(rows.at(&[1, 0]), 1.0);
        assert!((rows.at(&[0, 1]) - 1f64.sin()).abs() <= 1e-12);
    }

    #[test]
    fn time_freq_fails_beyond_trained_extent() {
        let mut r = rng(9);
        let mut store = ParamStore::new();
        let emb = PatchEmbedding::new(&mut store, "embed", PatchEmbedKind::TimeFreq, 2, 3, 6, &mut r).unwrap();
        let mut tape = Tape::new();
        let ok = tape.constant(Tensor::zeros(&[2, 3, 6])).unwrap();
        assert!(emb.apply(&mut tape, &store, ok).is_ok());
        let too_long = tape.constant(Tensor::zeros(&[2, 3, 7])).unwrap();
        assert!(matches!(
            emb.apply(&mut tape, &store, too_long),
            Err(Error::Extent(_))
        ));
    }

    #[test]
    fn sin_cos_and_pos_freq_accept_unseen_lengths() {
        let mut r = rng(10);
        for kind in [PatchEmbedKind::SinCos, PatchEmbedKind::PosFreq] {
            let mut store = ParamStore::new();
            let emb = PatchEmbedding::new(&mut store, "embed", kind, 4, 3, 4, &mut r).unwrap();
            for t2 in [2usize, 16] {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::zeros(&[4, 3, t2])).unwrap();
                let y = emb.apply(&mut tape, &store, x).unwrap();
                assert_eq!(tape.shape(y), &[4, 3, t2], "{kind} at T₂={t2}");
            }
        }
    }
}
