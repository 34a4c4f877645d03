// SPDX-License-Identifier: Apache-2.0

//! Point clouds, ground-truth boxes and scenes: KITTI file I/O, range
//! cropping, training-time augmentation and synthetic scene generation.

mod augment;
mod kitti;
mod synth;

pub use augment::{
    augment, build_gt_database, flip_y, gt_sample, points_in_box, rotate_z, scale, AugmentConfig,
    GtDatabase, GtEntry,
};
pub use kitti::{
    difficulty_of, format_kitti_line, heading_from_rotation_y, read_kitti_bin, read_kitti_calib, read_kitti_objects,
    read_kitti_scene, write_kitti_bin, write_kitti_labels, CameraToLidar, KittiObject,
};
pub use synth::{synth_scene, write_split, ClassTemplate, SynthConfig};

use std::f64::consts::TAU;

use crate::iou_conf::RotatedRect;
use crate::voxel_grid::VoxelGridSpec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub r: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, r: f32) -> Self {
        Self { x, y, z, r }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.r.is_finite())
    }
}

/// Wrap an angle into `[0, 2pi)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Oriented box in the LiDAR frame: geometric center, extents along the
/// heading (`l`), across it (`w`) and vertically (`h`), heading `theta`
/// measured from +x towards +y.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub class_id: usize,
}

impl Box3D {
    #[allow(clippy::too_many_arguments)]
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64, class_id: usize) -> Self {
        Self {
            x,
            y,
            z,
            l,
            w,
            h,
            theta: normalize_angle(theta),
            class_id,
        }
    }

    pub fn bev(&self) -> RotatedRect {
        RotatedRect {
            cx: self.x,
            cy: self.y,
            l: self.l,
            w: self.w,
            theta: self.theta,
        }
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// Express a world point in the box frame (origin at the center, x along
    /// the heading).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }

    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        [
            self.x + c * q[0] - s * q[1],
            self.y + s * q[0] + c * q[1],
            self.z + q[2],
        ]
    }

    /// Closed-box membership with an absolute slack `tol` (meters).
    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= self.l / 2.0 + tol
            && q[1].abs() <= self.w / 2.0 + tol
            && q[2].abs() <= self.h / 2.0 + tol
    }

    pub fn is_valid(&self) -> bool {
        self.l > 0.0 && self.w > 0.0 && self.h > 0.0 && (0.0..TAU).contains(&self.theta)
    }
}

/// KITTI difficulty stratum of a labelled object. Synthetic data uses
/// [`Difficulty::Unrated`], which every evaluation level accepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    /// Outside all three strata (e.g. heavily occluded, tiny in the image).
    Beyond,
    Unrated,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub frame_id: String,
    pub cloud: PointCloud,
    pub gt_boxes: Vec<Box3D>,
    /// Parallel to `gt_boxes`.
    pub gt_difficulty: Vec<Difficulty>,
}

impl Scene {
    pub fn new(frame_id: impl Into<String>, cloud: PointCloud, gt_boxes: Vec<Box3D>) -> Self {
        let n = gt_boxes.len();
        Self {
            frame_id: frame_id.into(),
            cloud,
            gt_boxes,
            gt_difficulty: vec![Difficulty::Unrated; n],
        }
    }
}

/// Drop points outside the half-open detection range and boxes whose
/// centers fall outside it.
pub fn crop_to_range(mut scene: Scene, spec: &VoxelGridSpec) -> Scene {
    scene.cloud.points.retain(|p| spec.contains(p.xyz()));
    let keep: Vec<bool> = scene
        .gt_boxes
        .iter()
        .map(|b| spec.contains([b.x, b.y, b.z]))
        .collect();
    let mut k = keep.iter();
    scene.gt_boxes.retain(|_| *k.next().unwrap());
    let mut k = keep.iter();
    scene.gt_difficulty.retain(|_| *k.next().unwrap());
    scene
}
