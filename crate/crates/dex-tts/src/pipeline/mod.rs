//! Model assembly, synthetic corpora, the training loop and persistence.

mod checkpoint;
mod config;
mod corpus;
mod model;
mod report;
mod train;

pub use checkpoint::{Checkpoint, RngState};
pub use config::{DecParams, MelParams, Mode, ModelConfig, StyleParams, TextParams, TrainParams};
pub use corpus::{synth_corpus, token_band_center, CorpusSpec, ToyCorpus, Utterance};
pub use model::{DexModel, PinnedChoices, UtteranceLosses};
pub use report::{nfe_sweep, RunReport, SweepRow};
pub use train::{train, write_loss_csv, Adam, LossRecord, TrainOptions, Trainer};
