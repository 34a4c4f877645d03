// SPDX-License-Identifier: Apache-2.0

//! Peak extraction and box decoding without suppression, AP evaluation and
//! calibration statistics.

mod ap;
mod calib;
mod report;

pub use ap::{evaluate_ap, evaluate_ap_filtered, in_level, Metric, PrCurve, RECALL_POSITIONS};
pub use calib::{calibration_stats, pearson, ranks, spearman, CalibStats};
pub use report::{metrics_report, pr_curve_svg, read_detections, write_detections};

use crate::autodiff::Tape;
use crate::data_ingest::Box3D;
use crate::detect_head::{HeadOut, RotBinCodec, TargetBundle};
use crate::real::{sigmoid, Real};
use crate::voxel_grid::BevGeometry;

/// Smallest decoded size, in meters.
pub const MIN_SIZE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub class_id: usize,
    pub u: usize,
    pub v: usize,
    pub score: f32,
}

/// Local maxima of a `(K, L, W)` heatmap under a 3x3 window. Among equal
/// neighbours only the one with the smallest row-major index survives. The
/// `top_k` highest peaks over all classes are kept, then those below `mu`
/// are dropped.
pub fn extract_peaks(heat: &[f32], k: usize, rows: usize, cols: usize, top_k: usize, mu: f32) -> Vec<Peak> {
    assert_eq!(heat.len(), k * rows * cols, "extract_peaks: map size");
    let mut peaks = Vec::new();
    for c in 0..k {
        let plane = &heat[c * rows * cols..(c + 1) * rows * cols];
        for u in 0..rows {
            for v in 0..cols {
                let s = plane[u * cols + v];
                let mut keep = true;
                'win: for du in -1i64..=1 {
                    for dv in -1i64..=1 {
                        if du == 0 && dv == 0 {
                            continue;
                        }
                        let (uu, vv) = (u as i64 + du, v as i64 + dv);
                        let outside = uu < 0 || vv < 0 || uu >= rows as i64 || vv >= cols as i64;
                        let n = if outside { 0.0 } else { plane[uu as usize * cols + vv as usize] };
                        // padding never wins a tie
                        let earlier = !outside && (du < 0 || (du == 0 && dv < 0));
                        if n > s || (n == s && earlier) {
                            keep = false;
                            break 'win;
                        }
                    }
                }
                if keep {
                    peaks.push(Peak { class_id: c, u, v, score: s });
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    peaks.truncate(top_k);
    peaks.retain(|p| p.score >= mu);
    peaks
}

/// Head outputs of one scene as plain arrays; `cls` and `iou` hold
/// probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps {
    pub num_classes: usize,
    pub bins: usize,
    pub geom: BevGeometry,
    pub cls: Vec<f32>,
    pub offset: Vec<f32>,
    pub z: Vec<f32>,
    pub size: Vec<f32>,
    pub rot_bin: Vec<f32>,
    pub rot_res: Vec<f32>,
    pub iou: Vec<f32>,
}

impl HeadMaps {
    /// Maps of batch element `b`.
    pub fn from_head<T: Real>(tape: &Tape<T>, out: &HeadOut, b: usize, geom: BevGeometry) -> Self {
        let slice = |v, squash: bool| -> Vec<f32> {
            let t = tape.value(v);
            let per = t.len() / t.dim(0);
            t.data[b * per..(b + 1) * per]
                .iter()
                .map(|&x| if squash { sigmoid(x).f64() as f32 } else { x.f64() as f32 })
                .collect()
        };
        let (k, bins) = (tape.value(out.cls).dim(1), tape.value(out.rot_bin).dim(1));
        Self {
            num_classes: k,
            bins,
            geom,
            cls: slice(out.cls, true),
            offset: slice(out.offset, false),
            z: slice(out.z, false),
            size: slice(out.size, false),
            rot_bin: slice(out.rot_bin, false),
            rot_res: slice(out.rot_res, false),
            iou: slice(out.iou, true),
        }
    }

    pub fn batch<T: Real>(tape: &Tape<T>, out: &HeadOut, geom: BevGeometry) -> Vec<Self> {
        (0..tape.value(out.cls).dim(0)).map(|b| Self::from_head(tape, out, b, geom)).collect()
    }

    /// Maps that reproduce the targets exactly: heatmap as classification
    /// output, regression targets at center pixels, a one-hot bin logit.
    pub fn from_targets(t: &TargetBundle, geom: BevGeometry, codec: &RotBinCodec) -> Self {
        let hw = t.rows * t.cols;
        let mut m = Self {
            num_classes: t.num_classes,
            bins: codec.bins,
            geom,
            cls: t.heat.iter().map(|&v| v as f32).collect(),
            offset: vec![0.0; 2 * hw],
            z: vec![0.0; hw],
            size: vec![0.0; 3 * hw],
            rot_bin: vec![0.0; codec.bins * hw],
            rot_res: vec![0.0; codec.bins * hw],
            iou: vec![1.0; hw],
        };
        for c in &t.centers {
            let p = c.u * t.cols + c.v;
            m.offset[p] = c.offset[0] as f32;
            m.offset[hw + p] = c.offset[1] as f32;
            m.z[p] = c.z as f32;
            for i in 0..3 {
                m.size[i * hw + p] = c.size[i] as f32;
            }
            m.rot_bin[c.rot_bin * hw + p] = 1.0;
            m.rot_res[c.rot_bin * hw + p] = c.rot_res as f32;
        }
        m
    }

    fn hw(&self) -> usize {
        self.geom.rows * self.geom.cols
    }

    fn at(&self, map: &[f32], c: usize, u: usize, v: usize) -> f64 {
        map[c * self.hw() + u * self.geom.cols + v] as f64
    }
}

/// Which score ranks the detections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    /// Classification peak value.
    Raw,
    /// Predicted IoU confidence.
    Recalibrated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub class_id: usize,
    pub cls_score: f32,
    pub iou_conf: f32,
    pub final_score: f32,
    /// `(u, v)` center pixel.
    pub pixel: (usize, usize),
    /// A decoded size was non-positive and got clamped.
    pub clamped: bool,
}

/// Decode peaks into boxes, sorted by final score (stable).
pub fn decode(peaks: &[Peak], maps: &HeadMaps, codec: &RotBinCodec, mode: ScoreMode) -> Vec<Detection> {
    let g = &maps.geom;
    let mut out: Vec<Detection> = peaks
        .iter()
        .map(|p| {
            let (u, v) = (p.u, p.v);
            let x = (u as f64 + maps.at(&maps.offset, 0, u, v)) * g.cell[0] + g.origin[0];
            let y = (v as f64 + maps.at(&maps.offset, 1, u, v)) * g.cell[1] + g.origin[1];
            let z = maps.at(&maps.z, 0, u, v);
            let mut clamped = false;
            let size = [0, 1, 2].map(|i| {
                let s = maps.at(&maps.size, i, u, v);
                if s > 0.0 {
                    s
                } else {
                    clamped = true;
                    MIN_SIZE
                }
            });
            let mut bin = 0;
            for c in 1..maps.bins {
                if maps.at(&maps.rot_bin, c, u, v) > maps.at(&maps.rot_bin, bin, u, v) {
                    bin = c;
                }
            }
            let theta = codec.decode(bin, maps.at(&maps.rot_res, bin, u, v));
            let iou_conf = maps.at(&maps.iou, 0, u, v) as f32;
            Detection {
                bbox: Box3D::new(x, y, z, size[0], size[1], size[2], theta, p.class_id),
                class_id: p.class_id,
                cls_score: p.score,
                iou_conf,
                final_score: match mode {
                    ScoreMode::Raw => p.score,
                    ScoreMode::Recalibrated => iou_conf,
                },
                pixel: (u, v),
                clamped,
            }
        })
        .collect();
    out.sort_by(|a, b| b.final_score.total_cmp(&a.final_score));
    out
}

/// Peak extraction and decoding for one scene.
pub fn detect(maps: &HeadMaps, codec: &RotBinCodec, top_k: usize, mu_cls: f32, mode: ScoreMode) -> Vec<Detection> {
    let peaks = extract_peaks(&maps.cls, maps.num_classes, maps.geom.rows, maps.geom.cols, top_k, mu_cls);
    decode(&peaks, maps, codec, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect_head::build_targets;
    use crate::voxel_grid::VoxelGridSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive oracle: a cell is kept iff no neighbour beats it in the
    /// lexicographic order (value, -row-major index).
    fn oracle(heat: &[f32], k: usize, rows: usize, cols: usize, top_k: usize, mu: f32) -> Vec<Peak> {
        let mut all = Vec::new();
        for c in 0..k {
            for u in 0..rows {
                for v in 0..cols {
                    let me = (heat[(c * rows + u) * cols + v], -((u * cols + v) as i64));
                    let mut best = true;
                    for uu in u.saturating_sub(1)..(u + 2).min(rows) {
                        for vv in v.saturating_sub(1)..(v + 2).min(cols) {
                            let other = (heat[(c * rows + uu) * cols + vv], -((uu * cols + vv) as i64));
                            if other > me {
                                best = false;
                            }
                        }
                    }
                    let border = u == 0 || v == 0 || u + 1 == rows || v + 1 == cols;
                    if border && me.0 < 0.0 {
                        best = false;
                    }
                    if best {
                        all.push(Peak { class_id: c, u, v, score: me.0 });
                    }
                }
            }
        }
        all.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        all.into_iter().take(top_k).filter(|p| p.score >= mu).collect()
    }

    #[test]
    fn single_blob_and_plateau() {
        let (rows, cols) = (9, 9);
        let heat: Vec<f32> = (0..81)
            .map(|i| {
                let (u, v) = ((i / 9) as f32, (i % 9) as f32);
                (-((u - 4.0).powi(2) + (v - 5.0).powi(2)) / 4.0).exp()
            })
            .collect();
        let p = extract_peaks(&heat, 1, rows, cols, 10, 0.0);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].u, p[0].v, p[0].score), (4, 5, 1.0));
        let p = extract_peaks(&[0.8; 36], 1, 6, 6, 10, 0.0);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].u, p[0].v), (0, 0));
    }

    #[test]
    fn threshold_after_top_k() {
        let mut heat = vec![0.0f32; 25];
        heat[0] = 0.9;
        heat[12] = 0.4;
        heat[24] = 0.6;
        let p = extract_peaks(&heat, 1, 5, 5, 2, 0.5);
        assert_eq!(p.len(), 2);
        let p = extract_peaks(&heat, 1, 5, 5, 3, 0.5);
        assert_eq!(p.len(), 2);
        let p = extract_peaks(&heat, 1, 5, 5, 1, 0.0);
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn random_maps_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let rows = rng.random_range(1..=32);
            let cols = rng.random_range(1..=32);
            let k = rng.random_range(1..=2);
            let levels = rng.random_range(2..6);
            // coarse quantisation creates plateaus
            let heat: Vec<f32> = (0..k * rows * cols).map(|_| rng.random_range(0..levels) as f32 / levels as f32).collect();
            let top_k = rng.random_range(1..20);
            let got = extract_peaks(&heat, k, rows, cols, top_k, 0.2);
            let want = oracle(&heat, k, rows, cols, top_k, 0.2);
            let key = |p: &[Peak]| {
                let mut v: Vec<_> = p.iter().map(|p| (p.class_id, p.u, p.v, p.score.to_bits())).collect();
                v.sort();
                v
            };
            // equal scores may be cut at top_k in a different order
            assert_eq!(got.len(), want.len());
            let gs: Vec<u32> = got.iter().map(|p| p.score.to_bits()).collect();
            let ws: Vec<u32> = want.iter().map(|p| p.score.to_bits()).collect();
            assert_eq!(gs, ws);
            if got.len() < top_k {
                assert_eq!(key(&got), key(&want));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn peaks_are_local_maxima(vals in proptest::collection::vec(0.0f32..1.0, 64)) {
            for p in extract_peaks(&vals, 1, 8, 8, 64, 0.0) {
                for u in p.u.saturating_sub(1)..(p.u + 2).min(8) {
                    for v in p.v.saturating_sub(1)..(p.v + 2).min(8) {
                        prop_assert!(vals[u * 8 + v] <= p.score);
                    }
                }
            }
        }
    }

    #[test]
    fn decode_origin_and_round_trip() {
        let spec = VoxelGridSpec::kitti();
        let geom = BevGeometry::new(&spec, 8);
        let codec = RotBinCodec::default();
        let b = Box3D::new(23.13, 5.77, -0.8, 3.9, 1.6, 1.5, 4.1, 0);
        let t = build_targets(&[b], 1, &geom, &codec);
        let maps = HeadMaps::from_targets(&t, geom, &codec);
        let dets = detect(&maps, &codec, 50, 0.5, ScoreMode::Raw);
        assert_eq!(dets.len(), 1);
        let d = &dets[0].bbox;
        assert!((d.x - b.x).abs() < 1e-5 && (d.y - b.y).abs() < 1e-5 && (d.z - b.z).abs() < 1e-5);
        assert!((d.theta - b.theta).abs() < 1e-5);

        let mut m = maps.clone();
        m.offset.iter_mut().for_each(|v| *v = 0.0);
        let d = decode(&[Peak { class_id: 0, u: 0, v: 0, score: 1.0 }], &m, &codec, ScoreMode::Raw);
        assert_eq!(d[0].bbox.x, spec.range_min[0]);
        assert!(d[0].clamped);
        assert_eq!(d[0].bbox.l, MIN_SIZE);
    }

    #[test]
    fn recalibrated_mode_changes_only_scores() {
        let geom = BevGeometry::new(&VoxelGridSpec::toy(), 8);
        let codec = RotBinCodec::default();
        let c1 = geom.cell_center(1, 1);
        let c2 = geom.cell_center(5, 6);
        let t = build_targets(
            &[
                Box3D::new(c1[0], c1[1], -1.0, 4.0, 1.7, 1.5, 0.3, 0),
                Box3D::new(c2[0], c2[1], -1.0, 4.0, 1.7, 1.5, 2.3, 0),
            ],
            1,
            &geom,
            &codec,
        );
        let mut maps = HeadMaps::from_targets(&t, geom, &codec);
        maps.iou[geom.cols + 1] = 0.2;
        maps.iou[5 * geom.cols + 6] = 0.9;
        let a = detect(&maps, &codec, 10, 0.5, ScoreMode::Raw);
        let b = detect(&maps, &codec, 10, 0.5, ScoreMode::Recalibrated);
        assert_eq!(a.len(), 2);
        let mut bs = b.clone();
        bs.reverse();
        for (x, y) in a.iter().zip(&bs) {
            assert_eq!((x.bbox, x.cls_score, x.iou_conf), (y.bbox, y.cls_score, y.iou_conf));
        }
        assert_eq!(b[0].final_score, 0.9);
    }
}
