//! Model assembly: the text encoder, aligner, style encoders and diffusion
//! decoder behind one build/loss/synthesize surface.

use super::config::{Mode, ModelConfig};
use super::corpus::Utterance;
use crate::aligner::{
    durations_from_log, length_regulate, mas_align, mas_likelihoods, AlignmentPath,
    DurationPredictor,
};
use crate::decoder::{Denoiser, NoiseSchedule, StyleRefs, TraceRow};
use crate::error::{Error, Result};
use crate::mel::MelSpec;
use crate::styles::{StyleEncoders, StyleTensors, StyleVars};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::textenc::{PhonemeSeq, TextEncoder};
use crate::init;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator on a named stream, so initialization, training and
/// sampling consume independent deterministic sequences.
pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_TRAIN: u64 = 1;

/// The assembled acoustic model.
pub struct DexModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub duration: DurationPredictor,
    mel_proj_w: ParamId,
    mel_proj_b: ParamId,
    pub styles: Option<StyleEncoders>,
    pub denoiser: Denoiser,
}

/// Fixed discrete decisions for one utterance: the searched alignment and
/// the quantizer's row selection. Pinning them makes the loss a smooth
/// function of the parameters, which finite-difference checks require.
#[derive(Clone, Debug)]
pub struct PinnedChoices {
    pub alignment: AlignmentPath,
    pub codes: Vec<usize>,
}

/// Per-utterance loss terms, still attached to the tape.
pub struct UtteranceLosses {
    pub duration: Var,
    pub prior: Var,
    pub diffusion: Var,
    pub commit: Var,
    pub alignment: AlignmentPath,
    /// (pre-quantization rows, codes) for the EMA codebook update.
    pub vq_update: Option<(Tensor, Vec<usize>)>,
}

impl DexModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_stream(config.train.seed, STREAM_INIT);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, config.text_encoder_config(), &mut rng)?;
        let duration = DurationPredictor::new(&mut store, config.text.hidden, &mut rng)?;
        let mel_proj_w = store.register(
            "aligner.mel_proj_w",
            init::linear(&[config.text.hidden, config.mel.bins], &mut rng),
        )?;
        let mel_proj_b =
            store.register("aligner.mel_proj_b", init::zeros(&[1, config.mel.bins]))?;
        let styles = match config.mode {
            Mode::Dex => Some(StyleEncoders::new(
                &mut store,
                config.mel.bins,
                config.dec.hidden,
                config.style.layers,
                config.style.codebook_size,
                config.style.codebook_dim,
                &mut rng,
            )?),
            Mode::Gedex => None,
        };
        let denoiser = Denoiser::new(&mut store, config.decoder_config(), &mut rng)?;
        Ok(Self {
            config,
            store,
            text,
            duration,
            mel_proj_w,
            mel_proj_b,
            styles,
            denoiser,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.config.sched
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }

    /// Style extraction for one reference (dex mode only).
    pub fn encode_styles(
        &self,
        tape: &mut Tape,
        mel: &Tensor,
        log_f0: &Tensor,
    ) -> Result<StyleVars> {
        let encoders = self
            .styles
            .as_ref()
            .ok_or_else(|| Error::Contract("reference-free model has no style encoders".into()))?;
        encoders.encode(tape, &self.store, mel, log_f0)
    }

    /// Text representation and its per-token mel-space projection.
    fn encode_text_and_centers(
        &self,
        tape: &mut Tape,
        phonemes: &PhonemeSeq,
        style: Option<Var>,
    ) -> Result<(Var, Var)> {
        let h_text = self.text.encode(tape, &self.store, phonemes, style)?;
        let w = tape.param(&self.store, self.mel_proj_w);
        let b = tape.param(&self.store, self.mel_proj_b);
        let centers = tape.linear(h_text, w, b)?;
        Ok((h_text, centers))
    }

    /// Builds the four loss terms for one training utterance. The reference
    /// for style extraction is the target speech itself. The (t, ε) draw is
    /// supplied by the caller so batch evaluation stays deterministic.
    pub fn utterance_losses(
        &self,
        tape: &mut Tape,
        utt: &Utterance,
        diff_time: f64,
        diff_noise: &Tensor,
    ) -> Result<UtteranceLosses> {
        self.utterance_losses_impl(tape, utt, diff_time, diff_noise, None)
    }

    /// [`DexModel::utterance_losses`] with the discrete decisions pinned.
    pub fn utterance_losses_pinned(
        &self,
        tape: &mut Tape,
        utt: &Utterance,
        diff_time: f64,
        diff_noise: &Tensor,
        pinned: &PinnedChoices,
    ) -> Result<UtteranceLosses> {
        self.utterance_losses_impl(tape, utt, diff_time, diff_noise, Some(pinned))
    }

    fn utterance_losses_impl(
        &self,
        tape: &mut Tape,
        utt: &Utterance,
        diff_time: f64,
        diff_noise: &Tensor,
        pinned: Option<&PinnedChoices>,
    ) -> Result<UtteranceLosses> {
        let styles = match self.config.mode {
            Mode::Dex => {
                let encoders = self.styles.as_ref().expect("dex mode has style encoders");
                Some(encoders.encode_with(
                    tape,
                    &self.store,
                    &utt.mel.data,
                    &utt.log_f0,
                    pinned.map(|p| p.codes.as_slice()),
                )?)
            }
            Mode::Gedex => None,
        };
        let cond = styles.as_ref().map(|s| s.pooled);
        let (h_text, centers) = self.encode_text_and_centers(tape, &utt.phonemes, cond)?;

        // alignment search runs on values, outside the gradient graph
        let alignment = match pinned {
            Some(p) => p.alignment.clone(),
            None => {
                let ll = mas_likelihoods(tape.value(centers), &utt.mel.data)?;
                mas_align(&ll)?
            }
        };

        let log_target: Vec<f64> = alignment
            .durations()
            .iter()
            .map(|&d| (d as f64).ln())
            .collect();
        let log_target = tape.constant(Tensor::new(
            vec![alignment.num_tokens(), 1],
            log_target,
        )?)?;
        let log_pred = self.duration.predict(tape, &self.store, h_text)?;
        let duration = tape.mse(log_pred, log_target)?;

        let expanded = length_regulate(tape, centers, &alignment)?;
        let mel_const = tape.constant(utt.mel.data.clone())?;
        let prior = tape.mse(expanded, mel_const)?;

        let style_refs = styles.as_ref().map(|s| StyleRefs {
            level_maps: s.level_maps,
            framewise: s.framewise,
        });
        // The denoising weight grows like 1/t at small noise levels, so its
        // gradient into the conditioning channel would drown the prior term;
        // the decoder reads the expanded representation as a frozen input.
        let cond_for_decoder = tape.detach(expanded);
        let diffusion = self.denoiser.diffusion_loss(
            tape,
            &self.store,
            &utt.mel.data,
            cond_for_decoder,
            style_refs,
            &self.config.sched,
            diff_time,
            diff_noise,
        )?;

        let (commit, vq_update) = match &styles {
            Some(s) => (
                s.commit_loss,
                Some((s.pre_quant.clone(), s.codes.clone())),
            ),
            None => (tape.constant(Tensor::scalar(0.0))?, None),
        };
        Ok(UtteranceLosses {
            duration,
            prior,
            diffusion,
            commit,
            alignment,
            vq_update,
        })
    }

    /// End-to-end synthesis. A reference is required in dex mode and rejected
    /// in gedex mode.
    pub fn synthesize(
        &self,
        phonemes: &PhonemeSeq,
        reference: Option<(&MelSpec, &Tensor)>,
        nfe: usize,
        seed: u64,
        trace: Option<&mut Vec<TraceRow>>,
    ) -> Result<MelSpec> {
        match (self.config.mode, reference.is_some()) {
            (Mode::Dex, false) => {
                return Err(Error::Input(
                    "dex mode requires a reference mel and pitch track".into(),
                ))
            }
            (Mode::Gedex, true) => {
                return Err(Error::Input(
                    "gedex mode does not accept a reference".into(),
                ))
            }
            _ => {}
        }
        self.synthesize_unchecked(phonemes, reference, nfe, seed, trace)
    }

    /// Synthesis without the mode/reference match check: a gedex model simply
    /// never reads the reference. Exists so tests can demonstrate that
    /// gedex output is bit-identical across different references.
    #[doc(hidden)]
    pub fn synthesize_unchecked(
        &self,
        phonemes: &PhonemeSeq,
        reference: Option<(&MelSpec, &Tensor)>,
        nfe: usize,
        seed: u64,
        trace: Option<&mut Vec<TraceRow>>,
    ) -> Result<MelSpec> {
        if nfe < 1 {
            return Err(Error::Contract("nfe must be >= 1".into()));
        }
        let mut tape = Tape::new();
        let styles = match (&self.styles, reference) {
            (Some(_), Some((mel, f0))) => {
                Some(self.encode_styles(&mut tape, &mel.data, f0)?)
            }
            (Some(_), None) => unreachable!("checked above"),
            (None, _) => None,
        };
        let cond = styles.as_ref().map(|s| s.pooled);
        let (h_text, centers) = self.encode_text_and_centers(&mut tape, phonemes, cond)?;
        let log_pred = self.duration.predict(&mut tape, &self.store, h_text)?;
        let alignment = durations_from_log(tape.value(log_pred))?;
        let expanded = length_regulate(&mut tape, centers, &alignment)?;
        let cond_mel = tape.value(expanded).clone();
        let style_values: Option<StyleTensors> = styles.as_ref().map(|s| s.snapshot(&tape));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampled = self.denoiser.sample_euler(
            &self.store,
            &cond_mel,
            style_values.as_ref(),
            &self.config.sched,
            nfe,
            &mut rng,
            trace,
        )?;
        MelSpec::new(
            sampled,
            self.config.mel.sample_rate as u32,
            self.config.mel.hop as u32,
        )
    }
}
