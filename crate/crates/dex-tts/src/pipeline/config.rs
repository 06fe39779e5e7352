//! Complete hyperparameter record, its named profiles, and the TOML config
//! file format whose keys mirror the struct fields.

use crate::decoder::{NoiseSchedule, PatchEmbedKind};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Whether the model consumes a reference (dex) or runs reference-free (gedex).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dex,
    Gedex,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Dex => "dex",
            Mode::Gedex => "gedex",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MelParams {
    pub bins: usize,
    pub fft: usize,
    pub hop: usize,
    pub win: usize,
    pub sample_rate: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TextParams {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub rope_base: f64,
    pub ffn_mult: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecParams {
    pub patch: usize,
    pub dit_blocks: usize,
    pub hidden: usize,
    pub dit_heads: usize,
    pub mlp_mult: usize,
    pub embed_kind: PatchEmbedKind,
    pub overlap: bool,
    pub max_frames: usize,
    pub scale_qk_adapter: bool,
    pub adapter_residual: bool,
    pub mean_shift_prior: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StyleParams {
    /// Conv depth of both reference encoders.
    pub layers: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    /// Weight of the commitment term inside the total loss (1.0 keeps the
    /// plain unweighted sum).
    pub commit_weight: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainParams {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Checkpoint every this many epochs (0 = only at the end).
    pub ckpt_every: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub vocab: usize,
    pub mel: MelParams,
    pub text: TextParams,
    pub dec: DecParams,
    pub style: StyleParams,
    pub sched: NoiseSchedule,
    pub train: TrainParams,
}

impl ModelConfig {
    /// Full-scale reference-conditioned profile.
    pub fn paper() -> Self {
        Self {
            mode: Mode::Dex,
            vocab: 100,
            mel: MelParams {
                bins: 80,
                fft: 1024,
                hop: 256,
                win: 1024,
                sample_rate: 22050,
            },
            text: TextParams {
                layers: 8,
                hidden: 192,
                heads: 2,
                rope_base: 10000.0,
                ffn_mult: 4,
            },
            dec: DecParams {
                patch: 2,
                dit_blocks: 4,
                hidden: 64,
                dit_heads: 4,
                mlp_mult: 4,
                embed_kind: PatchEmbedKind::ConvFreq,
                overlap: true,
                max_frames: 1024,
                scale_qk_adapter: false,
                adapter_residual: true,
                mean_shift_prior: false,
            },
            style: StyleParams {
                layers: 6,
                codebook_size: 512,
                codebook_dim: 192,
                commit_weight: 0.25,
            },
            sched: NoiseSchedule::default(),
            train: TrainParams {
                lr: 1e-4,
                batch: 32,
                steps: 100_000,
                seed: 7,
                ckpt_every: 0,
            },
        }
    }

    /// Reference-free profile: style modules removed, patch size 4.
    pub fn gedex_paper() -> Self {
        let mut cfg = Self::paper();
        cfg.mode = Mode::Gedex;
        cfg.dec.patch = 4;
        cfg
    }

    /// Desk-scale profile used by the acceptance corpus.
    pub fn toy() -> Self {
        Self {
            mode: Mode::Dex,
            vocab: 12,
            mel: MelParams {
                bins: 16,
                fft: 1024,
                hop: 256,
                win: 1024,
                sample_rate: 22050,
            },
            text: TextParams {
                layers: 2,
                hidden: 32,
                heads: 2,
                rope_base: 10000.0,
                ffn_mult: 4,
            },
            dec: DecParams {
                patch: 2,
                dit_blocks: 3,
                hidden: 32,
                dit_heads: 4,
                mlp_mult: 2,
                embed_kind: PatchEmbedKind::ConvFreq,
                overlap: true,
                max_frames: 96,
                scale_qk_adapter: false,
                adapter_residual: true,
                mean_shift_prior: false,
            },
            style: StyleParams {
                layers: 3,
                codebook_size: 32,
                codebook_dim: 48,
                commit_weight: 0.25,
            },
            sched: NoiseSchedule {
                sigma_data: 1.0,
                ..NoiseSchedule::default()
            },
            train: TrainParams {
                lr: 2e-3,
                batch: 4,
                steps: 300,
                seed: 7,
                ckpt_every: 0,
            },
        }
    }

    /// Reference-free desk-scale profile.
    pub fn toy_gedex() -> Self {
        let mut cfg = Self::toy();
        cfg.mode = Mode::Gedex;
        cfg.dec.patch = 4;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 {
            return Err(Error::Config("vocabulary must be non-empty".into()));
        }
        if self.mel.bins == 0 || self.mel.hop == 0 || self.mel.sample_rate == 0 {
            return Err(Error::Config("mel parameters must be positive".into()));
        }
        if self.train.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.style.commit_weight < 0.0 {
            return Err(Error::Config("commitment weight must be non-negative".into()));
        }
        self.sched.validate()?;
        self.text_encoder_config().validate()?;
        self.decoder_config().validate()?;
        Ok(())
    }

    /// Style vector dimension entering the text encoder (None in gedex mode).
    pub fn text_style_dim(&self) -> Option<usize> {
        match self.mode {
            Mode::Dex => Some(self.dec.hidden),
            Mode::Gedex => None,
        }
    }

    pub fn text_encoder_config(&self) -> crate::textenc::TextEncoderConfig {
        crate::textenc::TextEncoderConfig {
            layers: self.text.layers,
            hidden: self.text.hidden,
            heads: self.text.heads,
            rope_base: self.text.rope_base,
            vocab: self.vocab,
            ffn_mult: self.text.ffn_mult,
            style_dim: self.text_style_dim(),
        }
    }

    pub fn decoder_config(&self) -> crate::decoder::DecoderConfig {
        crate::decoder::DecoderConfig {
            mel_bins: self.mel.bins,
            hidden: self.dec.hidden,
            patch: self.dec.patch,
            dit_blocks: self.dec.dit_blocks,
            dit_heads: self.dec.dit_heads,
            mlp_mult: self.dec.mlp_mult,
            embed_kind: self.dec.embed_kind,
            max_frames: self.dec.max_frames,
            overlap: self.dec.overlap,
            style: match self.mode {
                Mode::Dex => Some(crate::decoder::StyleDims {
                    channels: self.dec.hidden,
                    dim: self.style.codebook_dim,
                }),
                Mode::Gedex => None,
            },
            scale_qk_adapter: self.dec.scale_qk_adapter,
            adapter_residual: self.dec.adapter_residual,
            mean_shift_prior: self.dec.mean_shift_prior,
        }
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Format(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
