//! Mel-spectrogram container and its on-disk representations (CSV matrix,
//! binary tensor, grayscale PGM plot).

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};
use std::io::Write;
use std::path::Path;

/// An F×T mel-spectrogram (rows are mel bins, columns are frames) with the
/// hop/sample-rate metadata needed to convert frames to seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpec {
    pub data: Tensor,
    pub sample_rate: u32,
    pub hop: u32,
}

impl MelSpec {
    pub fn new(data: Tensor, sample_rate: u32, hop: u32) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::Input(format!(
                "mel must be a 2-D matrix, got {:?}",
                data.shape()
            )));
        }
        if sample_rate == 0 || hop == 0 {
            return Err(Error::Config("sample rate and hop must be positive".into()));
        }
        Ok(Self {
            data,
            sample_rate,
            hop,
        })
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    /// Audio duration implied by the frame count.
    pub fn seconds(&self) -> f64 {
        self.frames() as f64 * self.hop as f64 / self.sample_rate as f64
    }

    /// One CSV row per mel bin, one column per frame.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let (bins, frames) = (self.bins(), self.frames());
        for b in 0..bins {
            let row: Vec<String> = (0..frames)
                .map(|t| format!("{}", self.data.data()[b * frames + t]))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path, sample_rate: u32, hop: u32) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|cell| {
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))
                })
                .collect::<Result<_>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::Format(format!(
                        "ragged CSV: line {} has {} cells, expected {}",
                        lineno + 1,
                        row.len(),
                        first.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Input(format!("empty mel file {path:?}")));
        }
        let (bins, frames) = (rows.len(), rows[0].len());
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(Tensor::new(vec![bins, frames], data)?, sample_rate, hop)
    }

    /// Binary form: the tensor wire format.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        write_tensor(&mut file, &self.data)?;
        Ok(())
    }

    pub fn read_binary(path: &Path, sample_rate: u32, hop: u32) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let data = read_tensor(&mut file)?;
        Self::new(data, sample_rate, hop)
    }

    /// Grayscale plot, min/max normalized: row = mel bin, column = frame.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let (bins, frames) = (self.bins(), self.frames());
        let lo = self.data.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self
            .data
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let mut file = std::fs::File::create(path)?;
        write!(file, "P5\n{frames} {bins}\n255\n")?;
        let mut pixels = Vec::with_capacity(bins * frames);
        for b in 0..bins {
            for t in 0..frames {
                let v = (self.data.data()[b * frames + t] - lo) / span;
                pixels.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        file.write_all(&pixels)?;
        Ok(())
    }
}

/// Mean squared error over the overlapping frame range of two mel matrices
/// with equal bin counts.
pub fn mse_overlap(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::Shape(format!(
            "mse_overlap wants matching bins: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let bins = a.shape()[0];
    let (ta, tb) = (a.shape()[1], b.shape()[1]);
    let t = ta.min(tb);
    let mut err = 0.0;
    for bin in 0..bins {
        for frame in 0..t {
            let d = a.data()[bin * ta + frame] - b.data()[bin * tb + frame];
            err += d * d;
        }
    }
    Ok(err / (bins * t) as f64)
}
