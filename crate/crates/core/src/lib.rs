// SPDX-License-Identifier: Apache-2.0

pub mod adfa;
pub mod autodiff;
pub mod data_ingest;
pub mod decoder_eval;
pub mod detect_head;
pub mod error;
pub mod gradcheck;
pub mod iou_conf;
pub mod linalg;
pub mod nn;
pub mod ops;
pub mod params;
pub mod real;
pub mod selftest;
pub mod sparse_backbone;
pub mod tensor;
pub mod train_harness;
pub mod voxel_grid;

pub use error::{Error, Result};
