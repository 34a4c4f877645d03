// SPDX-License-Identifier: Apache-2.0

use super::RotBinCodec;
use crate::adfa::mask_target;
use crate::data_ingest::Box3D;
use crate::voxel_grid::BevGeometry;

/// Overlap a shifted box must keep with the original for the heatmap
/// radius computation.
pub const MIN_OVERLAP: f64 = 0.7;

/// Radius (pixels) within which a corner-shifted box of size `h x w`
/// keeps IoU >= `min_overlap` with the original; smallest of the three
/// quadratic cases of CornerNet.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Regression targets of one object at its center pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterTarget {
    pub u: usize,
    pub v: usize,
    pub class_id: usize,
    pub offset: [f64; 2],
    pub z: f64,
    pub size: [f64; 3],
    pub rot_bin: usize,
    pub rot_res: f64,
    pub gt: Box3D,
}

/// Per-scene supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBundle {
    pub num_classes: usize,
    pub rows: usize,
    pub cols: usize,
    /// `(K, L, W)` class heatmaps.
    pub heat: Vec<f64>,
    /// One entry per distinct center pixel, ordered by pixel.
    pub centers: Vec<CenterTarget>,
    /// `(L, W)` BEV foreground mask for the attention branch.
    pub seg_mask: Vec<f64>,
}

impl TargetBundle {
    pub fn n_objects(&self) -> usize {
        self.centers.len()
    }

    /// Class id at center pixels, `None` elsewhere.
    pub fn center_mask(&self) -> Vec<Option<usize>> {
        let mut m = vec![None; self.rows * self.cols];
        for c in &self.centers {
            m[c.u * self.cols + c.v] = Some(c.class_id);
        }
        m
    }

    pub fn heat_at(&self, k: usize, u: usize, v: usize) -> f64 {
        self.heat[(k * self.rows + u) * self.cols + v]
    }
}

/// Build heatmaps and center targets for one scene. Boxes whose center
/// falls off the map or whose class is `>= num_classes` are ignored.
pub fn build_targets(gt: &[Box3D], num_classes: usize, geom: &BevGeometry, codec: &RotBinCodec) -> TargetBundle {
    let (rows, cols) = (geom.rows, geom.cols);
    let mut heat = vec![0.0f64; num_classes * rows * cols];
    let mut slots: Vec<Option<CenterTarget>> = vec![None; rows * cols];
    for b in gt {
        if b.class_id >= num_classes {
            continue;
        }
        let p = geom.to_pixel(b.x, b.y);
        if !(p[0] >= 0.0 && p[1] >= 0.0) {
            continue;
        }
        let (u, v) = (p[0].floor() as usize, p[1].floor() as usize);
        if u >= rows || v >= cols {
            continue;
        }
        let r = gaussian_radius(b.l / geom.cell[0], b.w / geom.cell[1], MIN_OVERLAP).max(1.0);
        let sigma = r / 3.0;
        let reach = (3.0 * sigma).ceil() as i64 + 1;
        let plane = &mut heat[b.class_id * rows * cols..(b.class_id + 1) * rows * cols];
        for du in -reach..=reach {
            for dv in -reach..=reach {
                let (uu, vv) = (u as i64 + du, v as i64 + dv);
                if uu < 0 || vv < 0 || uu >= rows as i64 || vv >= cols as i64 {
                    continue;
                }
                let g = (-((du * du + dv * dv) as f64) / (2.0 * sigma * sigma)).exp();
                let cell = &mut plane[uu as usize * cols + vv as usize];
                *cell = cell.max(g);
            }
        }
        let (rot_bin, rot_res) = codec.encode(b.theta);
        let t = CenterTarget {
            u,
            v,
            class_id: b.class_id,
            offset: [p[0] - u as f64, p[1] - v as f64],
            z: b.z,
            size: [b.l, b.w, b.h],
            rot_bin,
            rot_res,
            gt: *b,
        };
        let slot = &mut slots[u * cols + v];
        let replace = match slot {
            Some(prev) => b.l * b.w > prev.gt.l * prev.gt.w,
            None => true,
        };
        if replace {
            *slot = Some(t);
        }
    }
    TargetBundle {
        num_classes,
        rows,
        cols,
        heat,
        centers: slots.into_iter().flatten().collect(),
        seg_mask: mask_target(gt, geom),
    }
}
