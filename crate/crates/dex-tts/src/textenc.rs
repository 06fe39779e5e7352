//! Transformer text encoder: rotary positions on the attention queries and
//! keys, a swish gate after the attention output, group-normalized head
//! concatenation, and per-layer adaptive layer normalization when a reference
//! style vector is present.

use crate::adapters::AdaLayerNorm;
use crate::error::{Error, Result};
use crate::tensor::{NormKind, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{init, NORM_EPS};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Token id sequence, validated against a vocabulary size at construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSeq {
    ids: Vec<usize>,
}

impl PhonemeSeq {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("empty phoneme sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of size {vocab}"
            )));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Phoneme vocabulary: one symbol per line, line index = token id.
#[derive(Clone, Debug)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let symbols: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if symbols.is_empty() {
            return Err(Error::Input(format!("empty vocabulary file {path:?}")));
        }
        Ok(Self { symbols })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.symbols.join("\n") + "\n")?;
        Ok(())
    }

    /// Synthetic alphabet `p00`, `p01`, ... used by the toy corpora.
    pub fn synthetic(size: usize) -> Self {
        Self {
            symbols: (0..size).map(|i| format!("p{i:02}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub rope_base: f64,
    pub vocab: usize,
    pub ffn_mult: usize,
    /// Dimension of the pooled time-variant style vector; `None` builds the
    /// reference-free variant where every adaptive norm is a plain layer norm.
    pub style_dim: Option<usize>,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.vocab == 0 {
            return Err(Error::Config("text encoder extents must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if (self.hidden / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary pairing",
                self.hidden / self.heads
            )));
        }
        Ok(())
    }
}

/// Rotates consecutive value pairs of each row by position-dependent angles:
/// pair j at row n turns by (n + offset)·base^(−2j/d). Positions enter only
/// through rotations, so query/key dot products depend on relative offsets.
pub fn rope_apply(tape: &mut Tape, x: Var, offset: usize, base: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("rope wants [L×d], got {shape:?}")));
    }
    let (rows, dim) = (shape[0], shape[1]);
    if dim % 2 != 0 {
        return Err(Error::Config(format!("rope dimension {dim} must be even")));
    }
    let mut cos = Tensor::zeros(&[rows, dim]);
    let mut sin = Tensor::zeros(&[rows, dim]);
    for n in 0..rows {
        for j in 0..dim / 2 {
            let theta = base.powf(-2.0 * j as f64 / dim as f64);
            let angle = (n + offset) as f64 * theta;
            let (s, c) = angle.sin_cos();
            cos.data_mut()[n * dim + 2 * j] = c;
            cos.data_mut()[n * dim + 2 * j + 1] = c;
            sin.data_mut()[n * dim + 2 * j] = s;
            sin.data_mut()[n * dim + 2 * j + 1] = s;
        }
    }
    let cos = tape.constant(cos)?;
    let sin = tape.constant(sin)?;
    // (-x1, x0, -x3, x2, ...) via a pair swap plus alternating signs
    let xt = tape.transpose2(x)?;
    let perm: Vec<usize> = (0..dim).map(|i| i ^ 1).collect();
    let swapped = tape.gather_rows(xt, &perm)?;
    let swapped = tape.transpose2(swapped)?;
    let mut signs = Tensor::zeros(&[1, dim]);
    for j in 0..dim {
        signs.data_mut()[j] = if j % 2 == 0 { -1.0 } else { 1.0 };
    }
    let signs = tape.constant(signs)?;
    let swapped = tape.broadcast_mul(swapped, signs)?;
    let a = tape.mul(x, cos)?;
    let b = tape.mul(swapped, sin)?;
    tape.add(a, b)
}

struct EncoderLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wg: ParamId,
    wo: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    style_after_attn: Option<AdaLayerNorm>,
    style_after_ffn: Option<AdaLayerNorm>,
}

/// Phoneme encoder producing the text representation consumed by the aligner
/// and, through it, the diffusion decoder.
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    embedding: ParamId,
    layers: Vec<EncoderLayer>,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: TextEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.hidden;
        let embedding = store.register("textenc.embedding", init::embedding(&[cfg.vocab, c], rng))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("textenc.layer{l}");
            let inner = c * cfg.ffn_mult;
            let style = |store: &mut ParamStore, tag: &str, rng: &mut ChaCha8Rng| -> Result<Option<AdaLayerNorm>> {
                match cfg.style_dim {
                    Some(d) => Ok(Some(AdaLayerNorm::new(store, &format!("{p}.{tag}"), d, c, rng)?)),
                    None => Ok(None),
                }
            };
            layers.push(EncoderLayer {
                wq: store.register(&format!("{p}.wq"), init::linear(&[c, c], rng))?,
                wk: store.register(&format!("{p}.wk"), init::linear(&[c, c], rng))?,
                wv: store.register(&format!("{p}.wv"), init::linear(&[c, c], rng))?,
                wg: store.register(&format!("{p}.wg"), init::linear(&[c, c], rng))?,
                wo: store.register(&format!("{p}.wo"), init::linear(&[c, c], rng))?,
                ffn_w1: store.register(&format!("{p}.ffn_w1"), init::linear(&[c, inner], rng))?,
                ffn_b1: store.register(&format!("{p}.ffn_b1"), init::zeros(&[1, inner]))?,
                ffn_w2: store.register(&format!("{p}.ffn_w2"), init::linear(&[inner, c], rng))?,
                ffn_b2: store.register(&format!("{p}.ffn_b2"), init::zeros(&[1, c]))?,
                style_after_attn: style(store, "ada1", rng)?,
                style_after_ffn: style(store, "ada2", rng)?,
            });
        }
        Ok(Self {
            cfg,
            embedding,
            layers,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    /// Multi-head self-attention with rotary positions, group-normalized head
    /// concatenation, and a swish gate: swish(X·W_g) ⊙ (Y·W_o).
    fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        layer: &EncoderLayer,
    ) -> Result<Var> {
        let c = self.cfg.hidden;
        let heads = self.cfg.heads;
        let dh = c / heads;
        let wq = tape.param(store, layer.wq);
        let wk = tape.param(store, layer.wk);
        let wv = tape.param(store, layer.wv);
        let q_full = tape.matmul(x, wq)?;
        let k_full = tape.matmul(x, wk)?;
        let v_full = tape.matmul(x, wv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_axis(q_full, 1, h * dh, dh)?;
            let k = tape.slice_axis(k_full, 1, h * dh, dh)?;
            let v = tape.slice_axis(v_full, 1, h * dh, dh)?;
            let q = rope_apply(tape, q, 0, self.cfg.rope_base)?;
            let k = rope_apply(tape, k, 0, self.cfg.rope_base)?;
            let kt = tape.transpose2(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax(logits, 1)?;
            outs.push(tape.matmul(attn, v)?);
        }
        let y = tape.concat(&outs, 1)?;
        let y = tape.normalize(y, NormKind::Group(heads), NORM_EPS)?;
        let wg = tape.param(store, layer.wg);
        let wo = tape.param(store, layer.wo);
        let gate_in = tape.matmul(x, wg)?;
        let gate = tape.swish(gate_in)?;
        let proj = tape.matmul(y, wo)?;
        tape.mul(gate, proj)
    }

    fn feed_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        layer: &EncoderLayer,
    ) -> Result<Var> {
        let w1 = tape.param(store, layer.ffn_w1);
        let b1 = tape.param(store, layer.ffn_b1);
        let w2 = tape.param(store, layer.ffn_w2);
        let b2 = tape.param(store, layer.ffn_b2);
        let h = tape.linear(x, w1, b1)?;
        let h = tape.gelu(h)?;
        tape.linear(h, w2, b2)
    }

    fn adaptive_or_plain(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ada: &Option<AdaLayerNorm>,
        style: Option<Var>,
    ) -> Result<Var> {
        match (ada, style) {
            (Some(ada), Some(cond)) => ada.apply(tape, store, x, cond),
            (None, _) => tape.normalize(x, NormKind::Layer, NORM_EPS),
            (Some(_), None) => Err(Error::Contract(
                "style-conditioned encoder needs a style vector".into(),
            )),
        }
    }

    /// One pre-norm block: attention and feed-forward sublayers with residual
    /// connections, each followed by the (adaptive) normalization.
    pub fn encoder_layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        index: usize,
        style: Option<Var>,
    ) -> Result<Var> {
        let layer = &self.layers[index];
        let pre = tape.normalize(x, NormKind::Layer, NORM_EPS)?;
        let attn = self.attention(tape, store, pre, layer)?;
        let y = tape.add(attn, x)?;
        let y = self.adaptive_or_plain(tape, store, y, &layer.style_after_attn, style)?;
        let pre2 = tape.normalize(y, NormKind::Layer, NORM_EPS)?;
        let ffn = self.feed_forward(tape, store, pre2, layer)?;
        let out = tape.add(ffn, y)?;
        self.adaptive_or_plain(tape, store, out, &layer.style_after_ffn, style)
    }

    /// Embedding lookup followed by the full layer stack. No terminal layer
    /// norm is applied after the last block.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        phonemes: &PhonemeSeq,
        style: Option<Var>,
    ) -> Result<Var> {
        if let Some(&bad) = phonemes.ids().iter().find(|&&id| id >= self.cfg.vocab) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of size {}",
                self.cfg.vocab
            )));
        }
        if self.cfg.style_dim.is_some() && style.is_none() {
            return Err(Error::Contract(
                "style-conditioned encoder needs a style vector".into(),
            ));
        }
        let table = tape.param(store, self.embedding);
        let mut x = tape.gather_rows(table, phonemes.ids())?;
        for i in 0..self.layers.len() {
            x = self.encoder_layer(tape, store, x, i, style)?;
        }
        Ok(x)
    }
}
