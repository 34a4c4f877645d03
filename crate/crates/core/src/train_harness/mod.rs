// SPDX-License-Identifier: Apache-2.0

//! Model assembly, configuration, optimizer, checkpoints and the training
//! loop.

pub mod checkpoint;
mod config;
mod model;
mod optim;
mod trainer;

pub use config::{Config, KEYS};
pub use model::{Detector, DetectorOut, LossValues, Losses, ModelConfig, BEV_STRIDE, IN_CHANNELS};
pub use optim::{clip_grad_norm, AdamW, OneCycle, StepHyper};
pub use trainer::{
    detect_scenes, make_batch, synth_scenes, Batch, Dataset, StepLog, Trainer, CKPT_FILE, CONFIG_FILE, LOG_FILE,
    LOG_HEADER,
};
