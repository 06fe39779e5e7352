//! Training loop: adaptive-moment optimization of the four-term loss with a
//! per-epoch CSV log, deterministic under (config, seed) including the data
//! order, noise draws and EMA codebook updates. Per-utterance gradients may
//! be computed on worker threads; accumulation order is fixed by utterance
//! index, so the thread count never changes the result.

use super::config::ModelConfig;
use super::corpus::ToyCorpus;
use super::model::{rng_stream, DexModel, STREAM_TRAIN};
use crate::aligner::AlignmentPath;
use crate::error::{Error, Result};
use crate::tensor::{GradBuffer, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// First-order adaptive-moment optimizer over a parameter store.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) step: u64,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect(),
            v: store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect(),
        }
    }

    /// One update from the accumulated gradients; zeroes them afterwards.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).data().to_vec();
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for (i, g) in grad.iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            }
            let value = store.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let m_hat = self.m[slot].data()[i] / bias1;
                let v_hat = self.v[slot].data()[i] / bias2;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grads();
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// Mean loss components over one epoch, as written to the CSV log.
#[derive(Clone, Copy, Debug)]
pub struct LossRecord {
    pub epoch: usize,
    pub duration: f64,
    pub prior: f64,
    pub diffusion: f64,
    pub commit: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write loss.csv and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Worker-thread override; 0 picks from available parallelism and the
    /// DEX_THREADS environment variable (which caps whatever is chosen).
    pub threads: usize,
    /// Write the final epoch's searched durations, one CSV row per token.
    pub dump_durations: Option<PathBuf>,
    /// Print a progress line per epoch.
    pub verbose: bool,
}

struct UttResult {
    components: [f64; 4],
    grads: GradBuffer,
    alignment: AlignmentPath,
    vq_update: Option<(Tensor, Vec<usize>)>,
}

/// Training-loop state; checkpoints capture and restore all of it.
pub struct Trainer {
    pub model: DexModel,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub steps_done: usize,
}

impl Trainer {
    pub fn new(model: DexModel) -> Self {
        let optimizer = Adam::new(&model.store, model.config.train.lr);
        let rng = rng_stream(model.config.train.seed, STREAM_TRAIN);
        Self {
            model,
            optimizer,
            rng,
            epoch: 0,
            steps_done: 0,
        }
    }

    pub(crate) fn from_parts(
        model: DexModel,
        optimizer: Adam,
        rng: ChaCha8Rng,
        epoch: usize,
        steps_done: usize,
    ) -> Self {
        Self {
            model,
            optimizer,
            rng,
            epoch,
            steps_done,
        }
    }

    fn worker_count(&self, opts: &TrainOptions, batch: usize) -> usize {
        let mut n = if opts.threads > 0 {
            opts.threads
        } else {
            std::thread::available_parallelism().map(|p| p.get()).unwrap_or(1)
        };
        if let Ok(cap) = std::env::var("DEX_THREADS") {
            if let Ok(cap) = cap.trim().parse::<usize>() {
                n = n.min(cap.max(1));
            }
        }
        n.clamp(1, batch.max(1))
    }

    /// One optimizer step over a batch of utterance indices. Returns the mean
    /// loss components (duration, prior, diffusion, weighted commit).
    fn train_step(
        &mut self,
        corpus: &ToyCorpus,
        batch: &[usize],
        workers: usize,
        last_alignments: &mut [Option<AlignmentPath>],
    ) -> Result<[f64; 4]> {
        let commit_weight = self.model.config.style.commit_weight;
        let scale = 1.0 / batch.len() as f64;
        // draw (t, ε) for each utterance up front, in batch order
        let draws: Vec<(f64, Tensor)> = batch
            .iter()
            .map(|&i| {
                let t = self.model.config.sched.sample_train_time(&mut self.rng);
                let noise = Tensor::randn(
                    corpus.utterances[i].mel.data.shape(),
                    1.0,
                    &mut self.rng,
                );
                (t, noise)
            })
            .collect();

        let model = &self.model;
        let compute = |slot: usize| -> Result<UttResult> {
            let utt = &corpus.utterances[batch[slot]];
            let (t, noise) = &draws[slot];
            let mut tape = Tape::new();
            let losses = model.utterance_losses(&mut tape, utt, *t, noise)?;
            let components = [
                tape.value(losses.duration).item()?,
                tape.value(losses.prior).item()?,
                tape.value(losses.diffusion).item()?,
                commit_weight * tape.value(losses.commit).item()?,
            ];
            for (name, v) in ["L_dur", "L_prior", "L_diff", "L_vq"].iter().zip(components) {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("{name} became non-finite")));
                }
            }
            let weighted_commit = tape.scale(losses.commit, commit_weight)?;
            let a = tape.add(losses.duration, losses.prior)?;
            let b = tape.add(a, losses.diffusion)?;
            let total = tape.add(b, weighted_commit)?;
            let scaled = tape.scale(total, scale)?;
            let mut grads = GradBuffer::for_store(&model.store);
            tape.backward(scaled, &mut grads)?;
            Ok(UttResult {
                components,
                grads,
                alignment: losses.alignment,
                vq_update: losses.vq_update,
            })
        };

        let mut results: Vec<Option<Result<UttResult>>> = (0..batch.len()).map(|_| None).collect();
        if workers <= 1 {
            for (slot, result) in results.iter_mut().enumerate() {
                *result = Some(compute(slot));
            }
        } else {
            let collected: Vec<Vec<(usize, Result<UttResult>)>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        let compute = &compute;
                        scope.spawn(move || {
                            let mut out = Vec::new();
                            let mut slot = w;
                            while slot < batch.len() {
                                out.push((slot, compute(slot)));
                                slot += workers;
                            }
                            out
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("training worker panicked"))
                    .collect()
            });
            for group in collected {
                for (slot, result) in group {
                    results[slot] = Some(result);
                }
            }
        }

        let mut mean = [0.0f64; 4];
        let mut ema_updates = Vec::new();
        for (slot, result) in results.into_iter().enumerate() {
            let result = result.expect("every slot computed")?;
            result.grads.merge_into(&mut self.model.store)?;
            for (acc, v) in mean.iter_mut().zip(result.components) {
                *acc += v * scale;
            }
            last_alignments[batch[slot]] = Some(result.alignment);
            if let Some(update) = result.vq_update {
                ema_updates.push(update);
            }
        }
        self.optimizer.step(&mut self.model.store);
        if let Some(encoders) = &self.model.styles {
            for (inputs, codes) in ema_updates {
                encoders
                    .codebook
                    .ema_update(&mut self.model.store, &inputs, &codes)?;
            }
        }
        Ok(mean)
    }

    /// Runs until the configured step budget is reached. Writes loss.csv and
    /// checkpoints under the output directory when one is given.
    pub fn run(&mut self, corpus: &ToyCorpus, opts: &TrainOptions) -> Result<Vec<LossRecord>> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot train on an empty corpus".into()));
        }
        if corpus.bins != self.model.config.mel.bins || corpus.vocab > self.model.config.vocab {
            return Err(Error::Config(format!(
                "corpus ({} bins, vocab {}) does not fit the model ({} bins, vocab {})",
                corpus.bins, corpus.vocab, self.model.config.mel.bins, self.model.config.vocab
            )));
        }
        let target_steps = self.model.config.train.steps;
        let batch_size = self.model.config.train.batch.min(corpus.len());
        let workers = self.worker_count(opts, batch_size);
        let mut records = Vec::new();
        let mut last_alignments: Vec<Option<AlignmentPath>> = vec![None; corpus.len()];

        if let Some(dir) = &opts.out_dir {
            std::fs::create_dir_all(dir)?;
        }

        while self.steps_done < target_steps {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            order.shuffle(&mut self.rng);
            let mut sums = [0.0f64; 4];
            let mut steps_in_epoch = 0usize;
            for batch in order.chunks(batch_size) {
                if self.steps_done >= target_steps {
                    break;
                }
                let mean = self.train_step(corpus, batch, workers, &mut last_alignments)?;
                for (acc, v) in sums.iter_mut().zip(mean) {
                    *acc += v;
                }
                steps_in_epoch += 1;
                self.steps_done += 1;
                let total: f64 = mean.iter().sum();
                if total > 1e6 {
                    return Err(Error::Numeric(format!(
                        "training diverged: total loss {total} at step {}",
                        self.steps_done
                    )));
                }
            }
            if steps_in_epoch == 0 {
                break;
            }
            self.epoch += 1;
            let record = LossRecord {
                epoch: self.epoch,
                duration: sums[0] / steps_in_epoch as f64,
                prior: sums[1] / steps_in_epoch as f64,
                diffusion: sums[2] / steps_in_epoch as f64,
                commit: sums[3] / steps_in_epoch as f64,
                total: sums.iter().sum::<f64>() / steps_in_epoch as f64,
            };
            if opts.verbose {
                eprintln!(
                    "epoch {:4}  step {:5}  total {:.5}  dur {:.5}  prior {:.5}  diff {:.5}  vq {:.5}",
                    record.epoch, self.steps_done, record.total, record.duration, record.prior,
                    record.diffusion, record.commit
                );
            }
            records.push(record);
            let every = self.model.config.train.ckpt_every;
            if let Some(dir) = &opts.out_dir {
                if every > 0 && self.epoch % every == 0 && self.steps_done < target_steps {
                    self.checkpoint().save(&dir.join(format!("ckpt-epoch{}.bin", self.epoch)))?;
                }
            }
        }

        if let Some(dir) = &opts.out_dir {
            write_loss_csv(&dir.join("loss.csv"), &records)?;
            self.checkpoint().save(&dir.join("ckpt-final.bin"))?;
        }
        if let Some(path) = &opts.dump_durations {
            dump_durations(path, &last_alignments)?;
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> super::checkpoint::Checkpoint {
        super::checkpoint::Checkpoint::capture(self)
    }
}

/// Convenience wrapper: build, train to the step budget, return the trainer
/// (holding the final model) and the per-epoch records.
pub fn train(config: ModelConfig, corpus: &ToyCorpus, opts: &TrainOptions) -> Result<(Trainer, Vec<LossRecord>)> {
    let model = DexModel::new(config)?;
    let mut trainer = Trainer::new(model);
    let records = trainer.run(corpus, opts)?;
    Ok((trainer, records))
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut out = String::from("epoch,L_dur,L_prior,L_diff,L_vq,total\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.duration, r.prior, r.diffusion, r.commit, r.total
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn dump_durations(path: &Path, alignments: &[Option<AlignmentPath>]) -> Result<()> {
    let mut out = String::from("utterance,token,frames\n");
    for (u, alignment) in alignments.iter().enumerate() {
        if let Some(a) = alignment {
            for (t, &d) in a.durations().iter().enumerate() {
                out.push_str(&format!("{u},{t},{d}\n"));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
