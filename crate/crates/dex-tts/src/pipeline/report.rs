//! Synthesis-speed reporting: per-NFE wall-clock timing against the audio
//! duration implied by the synthesized frame count (real-time factor), plus
//! the sample error against a target utterance.

use super::corpus::Utterance;
use super::model::DexModel;
use crate::error::Result;
use crate::mel::mse_overlap;
use std::path::Path;
use std::time::Instant;

/// One sweep measurement. `rtf = synth_seconds / (frames · hop / sample_rate)`.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub nfe: usize,
    pub repeat: usize,
    pub mse: f64,
    pub synth_seconds: f64,
    pub frames: usize,
    pub rtf: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub rows: Vec<SweepRow>,
}

impl RunReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("nfe,repeat,mse,synth_seconds,frames,rtf\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.nfe, r.repeat, r.mse, r.synth_seconds, r.frames, r.rtf
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Mean RTF per NFE, in the order the NFEs first appear.
    pub fn mean_rtf_by_nfe(&self) -> Vec<(usize, f64)> {
        let mut order: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.nfe) {
                order.push(r.nfe);
            }
        }
        order
            .into_iter()
            .map(|nfe| {
                let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.nfe == nfe).collect();
                let mean = rows.iter().map(|r| r.rtf).sum::<f64>() / rows.len() as f64;
                (nfe, mean)
            })
            .collect()
    }
}

/// Synthesizes the utterance once per (nfe, repeat) pair, timing the full
/// synthesis call (model loading is the caller's concern and excluded).
pub fn nfe_sweep(
    model: &DexModel,
    target: &Utterance,
    nfe_list: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<RunReport> {
    let reference = match model.styles {
        Some(_) => Some((&target.mel, &target.log_f0)),
        None => None,
    };
    let hop = model.config.mel.hop as f64;
    let sample_rate = model.config.mel.sample_rate as f64;
    let mut report = RunReport::default();
    for &nfe in nfe_list {
        for repeat in 0..repeats.max(1) {
            let start = Instant::now();
            let mel = model.synthesize(&target.phonemes, reference, nfe, seed, None)?;
            let synth_seconds = start.elapsed().as_secs_f64();
            let frames = mel.frames();
            let audio_seconds = frames as f64 * hop / sample_rate;
            report.rows.push(SweepRow {
                nfe,
                repeat,
                mse: mse_overlap(&mel.data, &target.mel.data)?,
                synth_seconds,
                frames,
                rtf: synth_seconds / audio_seconds,
            });
        }
    }
    Ok(report)
}
