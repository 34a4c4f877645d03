// SPDX-License-Identifier: Apache-2.0

//! Center-heatmap detection head: target construction, the prediction
//! branches and their losses.

mod codec;
mod corners;
mod heads;
pub mod losses;
mod targets;

pub use codec::RotBinCodec;
pub use corners::{corner_signs, corners_of, corners_raw};
pub use heads::{Branch, HeadOut, HeadStack, CLS_BIAS_INIT};
pub use losses::{box_loss, center_l1_loss, cls_focal_loss, corner_loss, rot_loss, BoxMaps, Pix};
pub use targets::{build_targets, gaussian_radius, CenterTarget, TargetBundle, MIN_OVERLAP};

use crate::autodiff::{Tape, Var};
use crate::real::Real;
use crate::voxel_grid::BevGeometry;

/// Head loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct HeadLosses {
    pub cls: Var,
    pub offset: Var,
    pub z: Var,
    pub size: Var,
    pub rot: Var,
    pub corner: Var,
    /// `gamma`-weighted sum of the five regression terms.
    pub boxes: Var,
}

/// Classification and box losses of a batch, one bundle per scene. The
/// object count `N` is summed over the batch.
pub fn head_losses<T: Real>(
    tape: &mut Tape<T>,
    out: &HeadOut,
    bundles: &[TargetBundle],
    geom: &BevGeometry,
    codec: &RotBinCodec,
    gammas: [f64; 5],
) -> HeadLosses {
    let n: usize = bundles.iter().map(TargetBundle::n_objects).sum();
    let heat: Vec<f64> = bundles.iter().flat_map(|b| b.heat.iter().copied()).collect();
    let centers: Vec<(Pix, &CenterTarget)> = bundles
        .iter()
        .enumerate()
        .flat_map(|(b, t)| t.centers.iter().map(move |c| (Pix { b, u: c.u, v: c.v }, c)))
        .collect();
    let off: Vec<(Pix, Vec<f64>)> = centers.iter().map(|(p, c)| (*p, c.offset.to_vec())).collect();
    let z: Vec<(Pix, Vec<f64>)> = centers.iter().map(|(p, c)| (*p, vec![c.z])).collect();
    let size: Vec<(Pix, Vec<f64>)> = centers.iter().map(|(p, c)| (*p, c.size.to_vec())).collect();
    let rot: Vec<(Pix, usize, f64)> = centers.iter().map(|(p, c)| (*p, c.rot_bin, c.rot_res)).collect();
    let gts: Vec<_> = centers.iter().map(|(p, c)| (*p, c.gt)).collect();

    let cls = cls_focal_loss(tape, out.cls, &heat, n);
    let offset = center_l1_loss(tape, out.offset, &off, n);
    let zl = center_l1_loss(tape, out.z, &z, n);
    let sl = center_l1_loss(tape, out.size, &size, n);
    let rl = rot_loss(tape, out.rot_bin, out.rot_res, &rot, n);
    let maps = BoxMaps {
        offset: out.offset,
        z: out.z,
        size: out.size,
        rot_bin: out.rot_bin,
        rot_res: out.rot_res,
    };
    let corner = corner_loss(tape, maps, &gts, geom, codec, n);
    let boxes = box_loss(tape, [offset, zl, sl, rl, corner], gammas);
    HeadLosses {
        cls,
        offset,
        z: zl,
        size: sl,
        rot: rl,
        corner,
        boxes,
    }
}
