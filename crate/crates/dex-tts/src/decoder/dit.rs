//! Transformer blocks over flattened patches, conditioned on the diffusion
//! time through zero-initialized modulation (scale, shift, gate) so every
//! block starts as the identity, plus the shared sinusoidal time embedding.

use crate::error::{Error, Result};
use crate::tensor::{NormKind, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{init, NORM_EPS};
use rand_chacha::ChaCha8Rng;

/// Sinusoidal encoding of the log-time code followed by two affine layers;
/// every time-conditioned component shares this embedding.
pub struct TimeEmbedding {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time embedding dimension {dim} must be even"
            )));
        }
        Ok(Self {
            w1: store.register(&format!("{prefix}.w1"), init::linear(&[dim, dim], rng))?,
            b1: store.register(&format!("{prefix}.b1"), init::zeros(&[1, dim]))?,
            w2: store.register(&format!("{prefix}.w2"), init::linear(&[dim, dim], rng))?,
            b2: store.register(&format!("{prefix}.b2"), init::zeros(&[1, dim]))?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, code: f64) -> Result<Var> {
        // the sinusoids are evaluated at the continuous code, not at integer positions
        let mut data = vec![0.0; self.dim];
        for j in 0..self.dim / 2 {
            let omega = 10000f64.powf(-2.0 * j as f64 / self.dim as f64);
            let (s, c) = (code * omega).sin_cos();
            data[2 * j] = s;
            data[2 * j + 1] = c;
        }
        let base = tape.constant(Tensor::new(vec![1, self.dim], data)?)?;
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.linear(base, w1, b1)?;
        let h = tape.swish(h)?;
        tape.linear(h, w2, b2)
    }
}

/// Pre-norm attention + MLP block whose two normalizations are modulated by
/// the time embedding through per-block projections producing
/// (shift, scale, gate) pairs; gates start at zero.
pub struct DitBlock {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
    mod_w: ParamId,
    mod_b: ParamId,
    channels: usize,
    heads: usize,
}

impl DitBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        time_dim: usize,
        mlp_mult: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels % heads != 0 {
            return Err(Error::Config(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        let inner = channels * mlp_mult;
        Ok(Self {
            wq: store.register(&format!("{prefix}.wq"), init::linear(&[channels, channels], rng))?,
            wk: store.register(&format!("{prefix}.wk"), init::linear(&[channels, channels], rng))?,
            wv: store.register(&format!("{prefix}.wv"), init::linear(&[channels, channels], rng))?,
            wo: store.register(&format!("{prefix}.wo"), init::linear(&[channels, channels], rng))?,
            mlp_w1: store.register(&format!("{prefix}.mlp_w1"), init::linear(&[channels, inner], rng))?,
            mlp_b1: store.register(&format!("{prefix}.mlp_b1"), init::zeros(&[1, inner]))?,
            mlp_w2: store.register(&format!("{prefix}.mlp_w2"), init::linear(&[inner, channels], rng))?,
            mlp_b2: store.register(&format!("{prefix}.mlp_b2"), init::zeros(&[1, channels]))?,
            // zero modulation ⇒ identity block at initialization
            mod_w: store.register(&format!("{prefix}.mod_w"), init::zeros(&[time_dim, 6 * channels]))?,
            mod_b: store.register(&format!("{prefix}.mod_b"), init::zeros(&[1, 6 * channels]))?,
            channels,
            heads,
        })
    }

    fn modulate(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let gain = tape.add_scalar(scale, 1.0)?;
        let scaled = tape.broadcast_mul(x, gain)?;
        tape.broadcast_add(scaled, shift)
    }

    fn attention(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let c = self.channels;
        let dh = c / self.heads;
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let wo = tape.param(store, self.wo);
        let q_full = tape.matmul(x, wq)?;
        let k_full = tape.matmul(x, wk)?;
        let v_full = tape.matmul(x, wv)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = tape.slice_axis(q_full, 1, h * dh, dh)?;
            let k = tape.slice_axis(k_full, 1, h * dh, dh)?;
            let v = tape.slice_axis(v_full, 1, h * dh, dh)?;
            let kt = tape.transpose2(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax(logits, 1)?;
            outs.push(tape.matmul(attn, v)?);
        }
        let y = tape.concat(&outs, 1)?;
        tape.matmul(y, wo)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, t_emb: Var) -> Result<Var> {
        let c = self.channels;
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != c {
            return Err(Error::Shape(format!(
                "dit block wants [S×{c}], got {:?}",
                tape.shape(x)
            )));
        }
        let mod_w = tape.param(store, self.mod_w);
        let mod_b = tape.param(store, self.mod_b);
        let cond = tape.swish(t_emb)?;
        let m = tape.linear(cond, mod_w, mod_b)?; // [1×6C]
        let shift_a = tape.slice_axis(m, 1, 0, c)?;
        let scale_a = tape.slice_axis(m, 1, c, c)?;
        let gate_a = tape.slice_axis(m, 1, 2 * c, c)?;
        let shift_m = tape.slice_axis(m, 1, 3 * c, c)?;
        let scale_m = tape.slice_axis(m, 1, 4 * c, c)?;
        let gate_m = tape.slice_axis(m, 1, 5 * c, c)?;

        let normed = tape.normalize(x, NormKind::Layer, NORM_EPS)?;
        let a_in = Self::modulate(tape, normed, scale_a, shift_a)?;
        let attn = self.attention(tape, store, a_in)?;
        let gated = tape.broadcast_mul(attn, gate_a)?;
        let x = tape.add(x, gated)?;

        let normed = tape.normalize(x, NormKind::Layer, NORM_EPS)?;
        let m_in = Self::modulate(tape, normed, scale_m, shift_m)?;
        let w1 = tape.param(store, self.mlp_w1);
        let b1 = tape.param(store, self.mlp_b1);
        let w2 = tape.param(store, self.mlp_w2);
        let b2 = tape.param(store, self.mlp_b2);
        let h = tape.linear(m_in, w1, b1)?;
        let h = tape.gelu(h)?;
        let mlp = tape.linear(h, w2, b2)?;
        let gated = tape.broadcast_mul(mlp, gate_m)?;
        tape.add(x, gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn time_embedding_is_smooth_in_the_code_and_deterministic() {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let emb = TimeEmbedding::new(&mut store, "time", 8, &mut r).unwrap();
        let at = |code: f64, store: &ParamStore| {
            let mut tape = Tape::new();
            let e = emb.embed(&mut tape, store, code).unwrap();
            tape.value(e).clone()
        };
        assert_eq!(at(0.3, &store), at(0.3, &store));
        let a = at(0.3, &store);
        let b = at(0.3001, &store);
        let max_delta = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta < 0.01, "tiny code change moved the embedding by {max_delta}");
        assert_ne!(at(0.3, &store), at(2.0, &store));
    }

    #[test]
    fn fresh_block_is_exactly_identity() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let time = TimeEmbedding::new(&mut store, "time", 6, &mut r).unwrap();
        let block = DitBlock::new(&mut store, "dit0", 6, 2, 6, 4, &mut r).unwrap();
        let x_t = Tensor::randn(&[10, 6], 1.0, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone()).unwrap();
        let t_emb = time.embed(&mut tape, &store, 0.7).unwrap();
        let y = block.forward(&mut tape, &store, x, t_emb).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x_t.data()) {
            assert_eq!(a, b, "zero-gated block must be the identity");
        }
    }

    #[test]
    fn stack_of_four_blocks_preserves_shape() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let time = TimeEmbedding::new(&mut store, "time", 8, &mut r).unwrap();
        let blocks: Vec<DitBlock> = (0..4)
            .map(|i| DitBlock::new(&mut store, &format!("dit{i}"), 8, 4, 8, 4, &mut r).unwrap())
            .collect();
        // give the modulation nonzero weights so the blocks act
        for i in 0..4 {
            let id = store.id_of(&format!("dit{i}.mod_w")).unwrap();
            store.set_value(id, Tensor::randn(&[8, 48], 0.1, &mut r)).unwrap();
        }
        let mut tape = Tape::new();
        let mut x = tape.constant(Tensor::randn(&[12, 8], 1.0, &mut r)).unwrap();
        let t_emb = time.embed(&mut tape, &store, 0.2).unwrap();
        for b in &blocks {
            x = b.forward(&mut tape, &store, x, t_emb).unwrap();
        }
        assert_eq!(tape.shape(x), &[12, 8]);
        assert!(tape.value(x).all_finite());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let block = DitBlock::new(&mut store, "dit0", 4, 2, 4, 2, &mut r).unwrap();
        // recompute one head's attention directly from the same weights
        let x_t = Tensor::randn(&[5, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(x_t).unwrap();
        let wq = tape.param(&store, block.wq);
        let wk = tape.param(&store, block.wk);
        let q = tape.matmul(x, wq).unwrap();
        let k = tape.matmul(x, wk).unwrap();
        let q0 = tape.slice_axis(q, 1, 0, 2).unwrap();
        let k0 = tape.slice_axis(k, 1, 0, 2).unwrap();
        let kt = tape.transpose2(k0).unwrap();
        let logits = tape.matmul(q0, kt).unwrap();
        let logits = tape.scale(logits, 1.0 / 2f64.sqrt()).unwrap();
        let attn = tape.softmax(logits, 1).unwrap();
        for row in tape.value(attn).data().chunks(5) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }
}
