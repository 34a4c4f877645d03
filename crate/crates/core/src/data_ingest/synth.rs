// SPDX-License-Identifier: Apache-2.0

//! Deterministic synthetic LiDAR scenes.
//!
//! Objects are boxes standing on a flat ground plane. A virtual sensor at
//! the origin sees the two side faces nearest to it, so object interiors
//! and far faces stay empty, as in real scans.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{write_kitti_bin, write_kitti_labels, Box3D, CameraToLidar, Point, PointCloud, Scene};
use crate::error::{Error, Result};
use crate::iou_conf::{bev_intersection_area, RotatedRect};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassTemplate {
    pub name: String,
    pub l: (f64, f64),
    pub w: (f64, f64),
    pub h: (f64, f64),
}

impl ClassTemplate {
    fn new(name: &str, l: (f64, f64), w: (f64, f64), h: (f64, f64)) -> Self {
        Self {
            name: name.into(),
            l,
            w,
            h,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    /// Class templates indexed by class id.
    pub classes: Vec<ClassTemplate>,
    /// Class ids drawn uniformly for each object.
    pub class_ids: Vec<usize>,
    /// Inclusive range of object counts per scene.
    pub n_objects: (usize, usize),
    pub ground_z: f64,
    pub clutter_points: usize,
    /// Points on an object at `ref_dist` meters; scales with `(ref/d)^2`.
    pub ref_points: f64,
    pub ref_dist: f64,
    pub min_points: usize,
    pub max_points: usize,
    pub jitter: f64,
    /// Extra BEV clearance between objects (meters).
    pub margin: f64,
    pub max_retries: usize,
}

impl SynthConfig {
    pub fn kitti_classes() -> Vec<ClassTemplate> {
        vec![
            ClassTemplate::new("Car", (3.5, 4.5), (1.5, 1.8), (1.4, 1.6)),
            ClassTemplate::new("Pedestrian", (0.5, 0.9), (0.5, 0.8), (1.6, 1.9)),
            ClassTemplate::new("Cyclist", (1.6, 1.9), (0.5, 0.8), (1.6, 1.8)),
        ]
    }

    /// Car-only scenes on the 16 m x 16 m toy range.
    pub fn toy() -> Self {
        Self {
            range_min: [0.0, -8.0, -3.0],
            range_max: [16.0, 8.0, 1.0],
            classes: Self::kitti_classes(),
            class_ids: vec![0],
            n_objects: (1, 3),
            ground_z: -1.73,
            clutter_points: 60,
            ref_points: 120.0,
            ref_dist: 10.0,
            min_points: 30,
            max_points: 300,
            jitter: 0.02,
            margin: 0.3,
            max_retries: 200,
        }
    }

    pub fn kitti() -> Self {
        Self {
            range_min: [0.0, -40.0, -3.0],
            range_max: [70.4, 40.0, 1.0],
            n_objects: (3, 12),
            clutter_points: 2000,
            class_ids: vec![0, 1, 2],
            ..Self::toy()
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

fn inside_range(rect: &RotatedRect, cfg: &SynthConfig) -> bool {
    rect.corners().iter().all(|c| {
        c[0] >= cfg.range_min[0]
            && c[0] < cfg.range_max[0]
            && c[1] >= cfg.range_min[1]
            && c[1] < cfg.range_max[1]
    })
}

fn sample_box<R: Rng>(rng: &mut R, cfg: &SynthConfig, class_id: usize) -> Box3D {
    let t = &cfg.classes[class_id];
    let u = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let l = u(rng, t.l);
    let w = u(rng, t.w);
    let h = u(rng, t.h);
    let x = u(rng, (cfg.range_min[0], cfg.range_max[0]));
    let y = u(rng, (cfg.range_min[1], cfg.range_max[1]));
    let theta = rng.random_range(0.0..TAU);
    Box3D::new(x, y, cfg.ground_z + h / 2.0, l, w, h, theta, class_id)
}

/// Points on the two vertical faces whose centers are closest to the
/// sensor, slightly inset so they stay inside the box.
fn face_points<R: Rng>(rng: &mut R, cfg: &SynthConfig, b: &Box3D) -> Vec<Point> {
    const INSET: f64 = 0.04;
    let dist = b.x.hypot(b.y).max(1.0);
    let n = (cfg.ref_points * (cfg.ref_dist / dist).powi(2)).round() as usize;
    let n = n.clamp(cfg.min_points, cfg.max_points);
    let (hl, hw, hh) = (b.l / 2.0, b.w / 2.0, b.h / 2.0);
    // (normal axis, sign, half-extent along the face)
    let mut faces = [(0usize, 1.0f64), (0, -1.0), (1, 1.0), (1, -1.0)].map(|(axis, sign)| {
        let local = if axis == 0 { [sign * hl, 0.0, 0.0] } else { [0.0, sign * hw, 0.0] };
        let c = b.to_world(local);
        (c[0].hypot(c[1]), axis, sign)
    });
    faces.sort_by(|a, b| a.0.total_cmp(&b.0));
    let normal = Normal::new(0.0, cfg.jitter).expect("jitter must be non-negative");
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        let (_, axis, sign) = faces[i % 2];
        let along = if axis == 0 { hw } else { hl } - INSET;
        let s = rng.random_range(-along..along);
        let zt = rng.random_range(-(hh - INSET)..(hh - INSET));
        let depth = sign * (if axis == 0 { hl } else { hw } - INSET);
        let mut q = if axis == 0 { [depth, s, zt] } else { [s, depth, zt] };
        let lim = [hl - 0.01, hw - 0.01, hh - 0.01];
        for k in 0..3 {
            q[k] = (q[k] + normal.sample(rng)).clamp(-lim[k], lim[k]);
        }
        let p = b.to_world(q);
        let r = rng.random_range(0.2..0.9);
        pts.push(Point::new(p[0] as f32, p[1] as f32, p[2] as f32, r));
    }
    pts
}

/// Generate one scene. Fails when the requested objects cannot be placed
/// without BEV overlap within `max_retries` attempts each.
pub fn synth_scene<R: Rng>(rng: &mut R, cfg: &SynthConfig, frame_id: impl Into<String>) -> Result<Scene> {
    if cfg.class_ids.is_empty() && cfg.n_objects.1 > 0 {
        return Err(Error::Generation("no classes configured".into()));
    }
    let (lo, hi) = cfg.n_objects;
    let n = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    for k in 0..n {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let class_id = cfg.class_ids[rng.random_range(0..cfg.class_ids.len())];
            let b = sample_box(rng, cfg, class_id);
            let grown = RotatedRect {
                l: b.l + cfg.margin,
                w: b.w + cfg.margin,
                ..b.bev()
            };
            if !inside_range(&b.bev(), cfg) {
                continue;
            }
            if boxes.iter().any(|o| bev_intersection_area(&grown, &o.bev()) > 0.0) {
                continue;
            }
            boxes.push(b);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {} of {n} after {} retries",
                k + 1,
                cfg.max_retries
            )));
        }
    }

    let mut points = Vec::new();
    for b in &boxes {
        points.extend(face_points(rng, cfg, b));
    }
    let normal = Normal::new(0.0, cfg.jitter).expect("jitter must be non-negative");
    let mut placed = 0;
    let mut attempts = 0;
    while placed < cfg.clutter_points && attempts < cfg.clutter_points * 20 {
        attempts += 1;
        let x = rng.random_range(cfg.range_min[0]..cfg.range_max[0]);
        let y = rng.random_range(cfg.range_min[1]..cfg.range_max[1]);
        let z = cfg.ground_z + normal.sample(rng);
        let r = rng.random_range(0.0..0.3);
        if boxes.iter().any(|b| b.contains([x, y, z], 0.05)) {
            continue;
        }
        points.push(Point::new(x as f32, y as f32, z as f32, r));
        placed += 1;
    }
    Ok(Scene::new(frame_id, PointCloud::new(points), boxes))
}

/// Write scenes as `<dir>/<frame_id>.bin` + `<dir>/<frame_id>.txt`.
pub fn write_split(dir: &Path, scenes: &[Scene], classes: &[String]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let calib = CameraToLidar::default();
    for s in scenes {
        write_kitti_bin(&dir.join(format!("{}.bin", s.frame_id)), &s.cloud)?;
        write_kitti_labels(
            &dir.join(format!("{}.txt", s.frame_id)),
            &s.gt_boxes,
            None,
            classes,
            &calib,
        )?;
    }
    Ok(())
}
