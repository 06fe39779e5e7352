//! Deterministic synthetic corpora. Each token stamps a distinct spectral
//! band; a per-utterance gain and spectral tilt provide global (timbre-like)
//! variation and a slow sinusoidal contour provides time-varying
//! (intonation-like) variation. The contour doubles as the log-F0 track.
//! The whole corpus is standardized to zero mean and unit variance.

use crate::error::{Error, Result};
use crate::mel::MelSpec;
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::textenc::PhonemeSeq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

const CORPUS_MAGIC: &[u8; 4] = b"DEXC";
const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub phonemes: PhonemeSeq,
    pub mel: MelSpec,
    pub log_f0: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub seed: u64,
    pub vocab: usize,
    pub bins: usize,
    pub sample_rate: u32,
    pub hop: u32,
    pub utterances: Vec<Utterance>,
}

/// Generation knobs for [`synth_corpus`].
#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_utts: usize,
    pub vocab: usize,
    pub bins: usize,
    pub frames_range: (usize, usize),
    pub sample_rate: u32,
    pub hop: u32,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_utts: 8,
            vocab: 12,
            bins: 16,
            frames_range: (24, 48),
            sample_rate: 22050,
            hop: 256,
        }
    }
}

/// Band center (in bins) stamped by a token: injective across the vocabulary.
pub fn token_band_center(token: usize, vocab: usize, bins: usize) -> f64 {
    (token as f64 + 0.5) / vocab as f64 * (bins as f64 - 1.0)
}

pub fn synth_corpus(spec: &CorpusSpec) -> Result<ToyCorpus> {
    if spec.n_utts == 0 {
        return Err(Error::Input("corpus needs at least one utterance".into()));
    }
    if spec.vocab < 2 || spec.bins < 4 {
        return Err(Error::Config("corpus needs vocab >= 2 and bins >= 4".into()));
    }
    let (f_lo, f_hi) = spec.frames_range;
    if f_lo < 4 || f_hi < f_lo {
        return Err(Error::Config(format!(
            "bad frame range ({f_lo}, {f_hi})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bins = spec.bins;
    let band_width = (bins as f64 / spec.vocab as f64).max(1.0) * 0.8;

    let mut raw: Vec<(Vec<usize>, Vec<usize>, Vec<f64>, Tensor)> = Vec::new();
    for _ in 0..spec.n_utts {
        let n_tokens = rng.gen_range(4..=6usize);
        let lo = (f_lo / n_tokens).max(3);
        let hi = (f_hi / n_tokens).max(lo + 1);
        let tokens: Vec<usize> = (0..n_tokens).map(|_| rng.gen_range(0..spec.vocab)).collect();
        let durations: Vec<usize> = (0..n_tokens).map(|_| rng.gen_range(lo..=hi)).collect();
        let frames: usize = durations.iter().sum();

        // per-utterance style: global gain and spectral tilt (time-invariant),
        // a slow sinusoid (time-variant) that is also the log-F0 track
        let gain = rng.gen_range(0.7..1.3);
        let tilt = rng.gen_range(-0.3..0.3);
        let amp = rng.gen_range(0.3..0.6);
        let period = rng.gen_range(20.0..40.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let contour: Vec<f64> = (0..frames)
            .map(|t| amp * (std::f64::consts::TAU * t as f64 / period + phase).sin())
            .collect();

        let mut mel = Tensor::zeros(&[bins, frames]);
        let mut frame = 0usize;
        for (tok, &d) in tokens.iter().zip(&durations) {
            let center = token_band_center(*tok, spec.vocab, bins);
            for _ in 0..d {
                for b in 0..bins {
                    let bump = (-((b as f64 - center).powi(2)) / (2.0 * band_width * band_width)).exp();
                    let tilt_f = 1.0 + tilt * (b as f64 / (bins as f64 - 1.0) - 0.5);
                    mel.data_mut()[b * frames + frame] =
                        gain * tilt_f * bump * (1.0 + 0.25 * contour[frame]);
                }
                frame += 1;
            }
        }
        raw.push((tokens, durations, contour, mel));
    }

    // corpus-wide standardization
    let mut count = 0usize;
    let mut mean = 0.0f64;
    for (_, _, _, mel) in &raw {
        for &v in mel.data() {
            mean += v;
            count += 1;
        }
    }
    mean /= count as f64;
    let mut var = 0.0f64;
    for (_, _, _, mel) in &raw {
        for &v in mel.data() {
            var += (v - mean) * (v - mean);
        }
    }
    var /= count as f64;
    let std = var.sqrt().max(1e-12);

    let mut utterances = Vec::with_capacity(raw.len());
    for (tokens, _durations, contour, mut mel) in raw {
        for v in mel.data_mut() {
            *v = (*v - mean) / std;
        }
        utterances.push(Utterance {
            phonemes: PhonemeSeq::new(tokens, spec.vocab)?,
            mel: MelSpec::new(mel, spec.sample_rate, spec.hop)?,
            log_f0: Tensor::new(vec![contour.len()], contour)?,
        });
    }
    Ok(ToyCorpus {
        seed: spec.seed,
        vocab: spec.vocab,
        bins: spec.bins,
        sample_rate: spec.sample_rate,
        hop: spec.hop,
        utterances,
    })
}

impl ToyCorpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(CORPUS_MAGIC)?;
        file.write_all(&CORPUS_VERSION.to_le_bytes())?;
        file.write_all(&self.seed.to_le_bytes())?;
        for v in [
            self.vocab as u64,
            self.bins as u64,
            self.sample_rate as u64,
            self.hop as u64,
            self.utterances.len() as u64,
        ] {
            file.write_all(&v.to_le_bytes())?;
        }
        for utt in &self.utterances {
            file.write_all(&(utt.phonemes.len() as u64).to_le_bytes())?;
            for &id in utt.phonemes.ids() {
                file.write_all(&(id as u64).to_le_bytes())?;
            }
            write_tensor(&mut file, &utt.mel.data)?;
            write_tensor(&mut file, &utt.log_f0)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != CORPUS_MAGIC {
            return Err(Error::Format("not a corpus file".into()));
        }
        let mut ver = [0u8; 4];
        file.read_exact(&mut ver)?;
        if u32::from_le_bytes(ver) != CORPUS_VERSION {
            return Err(Error::Format("unsupported corpus version".into()));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |file: &mut std::fs::File| -> Result<u64> {
            file.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let seed = read_u64(&mut file)?;
        let vocab = read_u64(&mut file)? as usize;
        let bins = read_u64(&mut file)? as usize;
        let sample_rate = read_u64(&mut file)? as u32;
        let hop = read_u64(&mut file)? as u32;
        let n = read_u64(&mut file)? as usize;
        let mut utterances = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u64(&mut file)? as usize;
            let mut ids = Vec::with_capacity(len);
            for _ in 0..len {
                ids.push(read_u64(&mut file)? as usize);
            }
            let mel = read_tensor(&mut file)?;
            let log_f0 = read_tensor(&mut file)?;
            utterances.push(Utterance {
                phonemes: PhonemeSeq::new(ids, vocab)?,
                mel: MelSpec::new(mel, sample_rate, hop)?,
                log_f0,
            });
        }
        Ok(Self {
            seed,
            vocab,
            bins,
            sample_rate,
            hop,
            utterances,
        })
    }
}
