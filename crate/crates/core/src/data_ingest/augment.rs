// SPDX-License-Identifier: Apache-2.0

//! Training-time augmentation: ground-truth sampling, flip along X, global
//! scaling and global rotation about Z.

use std::f64::consts::FRAC_PI_4;

use rand::Rng;

use super::{normalize_angle, Box3D, Difficulty, Point, PointCloud, Scene};
use crate::iou_conf::bev_intersection_area;

/// A labelled object cut out of a training scene; points are stored in the
/// box frame so a paste is a single rigid transform.
#[derive(Clone, Debug, PartialEq)]
pub struct GtEntry {
    pub bbox: Box3D,
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GtDatabase {
    /// Indexed by class id.
    pub entries: Vec<Vec<GtEntry>>,
}

impl GtDatabase {
    pub fn len(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Collect every ground-truth object that contains at least one point.
pub fn build_gt_database(scenes: &[Scene], num_classes: usize) -> GtDatabase {
    let mut entries = vec![Vec::new(); num_classes];
    for scene in scenes {
        for b in &scene.gt_boxes {
            if b.class_id >= num_classes {
                continue;
            }
            let points: Vec<Point> = scene
                .cloud
                .points
                .iter()
                .filter(|p| b.contains(p.xyz(), 0.0))
                .map(|p| {
                    let q = b.to_local(p.xyz());
                    Point::new(q[0] as f32, q[1] as f32, q[2] as f32, p.r)
                })
                .collect();
            if !points.is_empty() {
                entries[b.class_id].push(GtEntry { bbox: *b, points });
            }
        }
    }
    GtDatabase { entries }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub gt_sampling: bool,
    /// Paste attempts per class per scene.
    pub max_paste: usize,
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    pub rot_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gt_sampling: true,
            max_paste: 8,
            flip_prob: 0.5,
            scale_range: (0.95, 1.05),
            rot_range: (-FRAC_PI_4, FRAC_PI_4),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            gt_sampling: false,
            max_paste: 0,
            flip_prob: 0.0,
            scale_range: (1.0, 1.0),
            rot_range: (0.0, 0.0),
        }
    }
}

fn overlaps_any(b: &Box3D, boxes: &[Box3D]) -> bool {
    boxes
        .iter()
        .any(|o| bev_intersection_area(&b.bev(), &o.bev()) > 0.0)
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Paste database objects that do not overlap any box already in the
/// scene (including earlier pastes). Scene points inside an accepted
/// box are removed before its points are added.
pub fn gt_sample<R: Rng>(mut scene: Scene, db: &GtDatabase, rng: &mut R, max_paste: usize) -> Scene {
    for class_entries in &db.entries {
        if class_entries.is_empty() {
            continue;
        }
        for _ in 0..max_paste {
            let e = &class_entries[rng.random_range(0..class_entries.len())];
            if overlaps_any(&e.bbox, &scene.gt_boxes) {
                continue;
            }
            let b = e.bbox;
            scene.cloud.points.retain(|p| !b.contains(p.xyz(), 0.0));
            scene.cloud.points.extend(e.points.iter().map(|p| {
                let w = b.to_world([p.x as f64, p.y as f64, p.z as f64]);
                Point::new(w[0] as f32, w[1] as f32, w[2] as f32, p.r)
            }));
            scene.gt_boxes.push(b);
            scene.gt_difficulty.push(Difficulty::Unrated);
        }
    }
    scene
}

pub fn flip_y(mut scene: Scene) -> Scene {
    for p in &mut scene.cloud.points {
        p.y = -p.y;
    }
    for b in &mut scene.gt_boxes {
        b.y = -b.y;
        b.theta = normalize_angle(-b.theta);
    }
    scene
}

pub fn scale(mut scene: Scene, s: f64) -> Scene {
    let sf = s as f32;
    for p in &mut scene.cloud.points {
        p.x *= sf;
        p.y *= sf;
        p.z *= sf;
    }
    for b in &mut scene.gt_boxes {
        b.x *= s;
        b.y *= s;
        b.z *= s;
        b.l *= s;
        b.w *= s;
        b.h *= s;
    }
    scene
}

pub fn rotate_z(mut scene: Scene, angle: f64) -> Scene {
    let (s, c) = angle.sin_cos();
    for p in &mut scene.cloud.points {
        let (x, y) = (p.x as f64, p.y as f64);
        p.x = (c * x - s * y) as f32;
        p.y = (s * x + c * y) as f32;
    }
    for b in &mut scene.gt_boxes {
        let (x, y) = (b.x, b.y);
        b.x = c * x - s * y;
        b.y = s * x + c * y;
        b.theta = normalize_angle(b.theta + angle);
    }
    scene
}

/// Apply the full augmentation chain. The caller crops to the detection
/// range afterwards.
pub fn augment<R: Rng>(scene: Scene, db: &GtDatabase, rng: &mut R, cfg: &AugmentConfig) -> Scene {
    let mut scene = scene;
    if cfg.gt_sampling {
        scene = gt_sample(scene, db, rng, cfg.max_paste);
    }
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let s = uniform(rng, cfg.scale_range);
    let a = uniform(rng, cfg.rot_range);
    if flip {
        scene = flip_y(scene);
    }
    scene = scale(scene, s);
    rotate_z(scene, a)
}

/// Points of `cloud` inside `b`, used by tests and the database builder.
pub fn points_in_box(cloud: &PointCloud, b: &Box3D, tol: f64) -> usize {
    cloud.points.iter().filter(|p| b.contains(p.xyz(), tol)).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_ingest::{synth_scene, SynthConfig};
    use crate::iou_conf::iou_bev;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn one_box(b: Box3D, pts: Vec<Point>) -> Scene {
        Scene::new("t", PointCloud::new(pts), vec![b])
    }

    #[test]
    fn flip_example() {
        let s = flip_y(one_box(Box3D::new(5.0, 2.0, 0.0, 4.0, 2.0, 1.5, FRAC_PI_2, 0), vec![]));
        let b = s.gt_boxes[0];
        assert_eq!((b.x, b.y), (5.0, -2.0));
        assert!((b.theta - 1.5 * PI).abs() < 1e-12);
    }

    #[test]
    fn scale_example() {
        let s = scale(one_box(Box3D::new(1.0, 1.0, 0.0, 4.0, 2.0, 1.5, 0.0, 0), vec![]), 1.05);
        assert!((s.gt_boxes[0].l - 4.2).abs() < 1e-12);
    }

    #[test]
    fn rotation_example() {
        let s = rotate_z(one_box(Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0), vec![Point::new(1.0, 0.0, 0.0, 0.0)]), FRAC_PI_4);
        let p = s.cloud.points[0];
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((p.x - h).abs() < 1e-6 && (p.y - h).abs() < 1e-6 && p.z == 0.0);
    }

    fn synth_cfg() -> SynthConfig {
        let mut cfg = SynthConfig::toy();
        cfg.classes = SynthConfig::kitti_classes();
        cfg.class_ids = vec![0, 1, 2];
        cfg.n_objects = (1, 4);
        cfg
    }

    #[test]
    fn membership_survives_transforms() {
        let cfg = synth_cfg();
        let aug = AugmentConfig {
            gt_sampling: false,
            ..AugmentConfig::default()
        };
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = synth_scene(&mut rng, &cfg, "s").unwrap();
            // indices of (point, box) pairs inside before augmenting
            let inside: Vec<(usize, usize)> = scene
                .cloud
                .points
                .iter()
                .enumerate()
                .flat_map(|(i, p)| {
                    scene
                        .gt_boxes
                        .iter()
                        .enumerate()
                        .filter(move |(_, b)| b.contains(p.xyz(), 0.0))
                        .map(move |(j, _)| (i, j))
                })
                .collect();
            let out = augment(scene, &GtDatabase::default(), &mut rng, &aug);
            for (i, j) in inside {
                assert!(
                    out.gt_boxes[j].contains(out.cloud.points[i].xyz(), 1e-4),
                    "seed {seed}: point {i} left box {j}"
                );
            }
        }
    }

    #[test]
    fn gt_sampling_never_overlaps() {
        let cfg = synth_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let scenes: Vec<Scene> = (0..20)
            .map(|i| synth_scene(&mut rng, &cfg, format!("{i}")).unwrap())
            .collect();
        let db = build_gt_database(&scenes, 3);
        assert!(!db.is_empty());
        assert!(db.entries.iter().flatten().all(|e| !e.points.is_empty()));
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = synth_scene(&mut rng, &cfg, "x").unwrap();
            let n0 = scene.gt_boxes.len();
            let out = gt_sample(scene, &db, &mut rng, 8);
            assert!(out.gt_boxes.len() >= n0);
            for (i, a) in out.gt_boxes.iter().enumerate() {
                for b in &out.gt_boxes[i + 1..] {
                    assert_eq!(iou_bev(&a.bev(), &b.bev()), 0.0);
                }
            }
            for b in &out.gt_boxes[n0..] {
                assert!(points_in_box(&out.cloud, b, 1e-4) > 0);
            }
        }
    }

    #[test]
    fn augment_is_deterministic() {
        let cfg = synth_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scenes: Vec<Scene> = (0..5)
            .map(|i| synth_scene(&mut rng, &cfg, format!("{i}")).unwrap())
            .collect();
        let db = build_gt_database(&scenes, 3);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            augment(scenes[0].clone(), &db, &mut rng, &AugmentConfig::default())
        };
        assert_eq!(run(), run());
    }
}
