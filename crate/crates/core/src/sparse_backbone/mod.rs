// SPDX-License-Identifier: Apache-2.0

//! Sparse 3D convolutions driven by explicit rulebooks, and the
//! four-stage residual backbone built from them.

mod conv;
mod resvoxelnet;
mod rulebook;

pub use conv::{sparse_conv, sparse_conv_forward, SparseConvLayer};
pub use resvoxelnet::{ResBlock, ResVoxelNet, Stage};
pub use rulebook::{build_rulebook, tap_offset, Rulebook, SparseConvKind, TAPS};

use crate::autodiff::Var;
use crate::voxel_grid::VoxelCoord;

/// Sparse volume whose features live on a tape.
#[derive(Clone, Debug)]
pub struct SparseVar {
    pub coords: Vec<VoxelCoord>,
    /// `(N, C)`.
    pub feats: Var,
    pub spatial_shape: [usize; 3],
    pub batch_size: usize,
}
