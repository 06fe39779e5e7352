//! Checkpoint file: magic "DEXT", version, config JSON block, training
//! counters, generator state, named parameter tensors and optimizer moments.
//! Saving, loading and re-saving produces byte-identical files.

use super::config::ModelConfig;
use super::model::DexModel;
use super::train::{Adam, Trainer};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DEXT";
const VERSION: u32 = 1;

/// Serializable generator state (seed, stream, word position).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

struct OptState {
    step: u64,
    moments: Vec<(Tensor, Tensor)>,
}

/// A complete training snapshot.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: u64,
    pub steps_done: u64,
    rng: RngState,
    params: Vec<(String, Tensor)>,
    opt: Option<OptState>,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        let params = trainer
            .model
            .store
            .iter()
            .map(|(name, value)| (name.to_string(), value.clone()))
            .collect();
        let moments = trainer
            .optimizer
            .m
            .iter()
            .zip(&trainer.optimizer.v)
            .map(|(m, v)| (m.clone(), v.clone()))
            .collect();
        Self {
            config: trainer.model.config.clone(),
            epoch: trainer.epoch as u64,
            steps_done: trainer.steps_done as u64,
            rng: RngState::capture(&trainer.rng),
            params,
            opt: Some(OptState {
                step: trainer.optimizer.steps_taken(),
                moments,
            }),
        }
    }

    /// Rebuilds the trainer: model structure from the config, parameter
    /// values and optimizer moments from the snapshot.
    pub fn restore(&self) -> Result<Trainer> {
        let mut model = DexModel::new(self.config.clone())?;
        if self.params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model wants {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store
                .id_of(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            model.store.set_value(id, value.clone())?;
        }
        let mut optimizer = Adam::new(&model.store, model.config.train.lr);
        if let Some(opt) = &self.opt {
            if opt.moments.len() != model.store.len() {
                return Err(Error::Format("optimizer state length mismatch".into()));
            }
            optimizer.step = opt.step;
            optimizer.m = opt.moments.iter().map(|(m, _)| m.clone()).collect();
            optimizer.v = opt.moments.iter().map(|(_, v)| v.clone()).collect();
        }
        Ok(Trainer::from_parts(
            model,
            optimizer,
            self.rng.restore(),
            self.epoch as usize,
            self.steps_done as usize,
        ))
    }

    /// The stored model only (drops optimizer and generator state).
    pub fn model(&self) -> Result<DexModel> {
        Ok(self.restore()?.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
        file.write_all(&(config.len() as u64).to_le_bytes())?;
        file.write_all(&config)?;
        file.write_all(&self.epoch.to_le_bytes())?;
        file.write_all(&self.steps_done.to_le_bytes())?;
        file.write_all(&self.rng.seed)?;
        file.write_all(&self.rng.stream.to_le_bytes())?;
        file.write_all(&self.rng.word_pos.to_le_bytes())?;
        file.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, value) in &self.params {
            let bytes = name.as_bytes();
            file.write_all(&(bytes.len() as u64).to_le_bytes())?;
            file.write_all(bytes)?;
            write_tensor(&mut file, value)?;
        }
        match &self.opt {
            None => file.write_all(&[0u8])?,
            Some(opt) => {
                file.write_all(&[1u8])?;
                file.write_all(&opt.step.to_le_bytes())?;
                for (m, v) in &opt.moments {
                    write_tensor(&mut file, m)?;
                    write_tensor(&mut file, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut u32buf = [0u8; 4];
        file.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != VERSION {
            return Err(Error::Format("unsupported checkpoint version".into()));
        }
        let config_len = read_u64(&mut file)? as usize;
        let mut config_bytes = vec![0u8; config_len];
        file.read_exact(&mut config_bytes)?;
        let config: ModelConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| Error::Format(format!("config parse: {e}")))?;
        let epoch = read_u64(&mut file)?;
        let steps_done = read_u64(&mut file)?;
        let mut seed = [0u8; 32];
        file.read_exact(&mut seed)?;
        let stream = read_u64(&mut file)?;
        let mut wp = [0u8; 16];
        file.read_exact(&mut wp)?;
        let word_pos = u128::from_le_bytes(wp);
        let n_params = read_u64(&mut file)? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = read_u64(&mut file)? as usize;
            let mut name = vec![0u8; name_len];
            file.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("invalid parameter name".into()))?;
            let value = read_tensor(&mut file)?;
            params.push((name, value));
        }
        let mut flag = [0u8; 1];
        file.read_exact(&mut flag)?;
        let opt = match flag[0] {
            0 => None,
            1 => {
                let step = read_u64(&mut file)?;
                let mut moments = Vec::with_capacity(n_params);
                for _ in 0..n_params {
                    let m = read_tensor(&mut file)?;
                    let v = read_tensor(&mut file)?;
                    moments.push((m, v));
                }
                Some(OptState { step, moments })
            }
            other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
        };
        Ok(Self {
            config,
            epoch,
            steps_done,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            params,
            opt,
        })
    }
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
