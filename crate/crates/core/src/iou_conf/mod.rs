// SPDX-License-Identifier: Apache-2.0

//! Rotated IoU, training samples for the IoU-confidence head, its loss and
//! inference-time score recalibration.

mod iou;

pub use iou::{bev_intersection_area, iou_3d, iou_bev, RotatedRect};

use crate::autodiff::{Tape, Var};
use crate::data_ingest::Box3D;
use crate::decoder_eval::{decode, extract_peaks, Detection, HeadMaps, ScoreMode};
use crate::detect_head::RotBinCodec;
use crate::real::{sigmoid, Real};
use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-4;

/// Confidence target for a box with the given IoU against its best
/// ground truth: `min(1, max(0, 2 iou - 0.5))`.
pub fn iou_to_conf(iou: f64) -> f64 {
    (2.0 * iou - 0.5).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceSample {
    pub batch: usize,
    pub u: usize,
    pub v: usize,
    pub pred_box: Box3D,
    pub peak_score: f32,
    pub iou_target: f64,
    pub c_target: f64,
}

/// Best IoU of `b` against any ground-truth box, 0 without ground truth.
pub fn best_iou(b: &Box3D, gts: &[Box3D]) -> f64 {
    gts.iter().map(|g| iou_3d(b, g)).fold(0.0, f64::max)
}

/// Top-`m` heatmap peaks of one scene (pooled over classes), decoded and
/// labelled with their confidence targets.
pub fn select_confidence_samples(
    batch: usize,
    maps: &HeadMaps,
    gts: &[Box3D],
    codec: &RotBinCodec,
    m: usize,
) -> Vec<ConfidenceSample> {
    let peaks = extract_peaks(&maps.cls, maps.num_classes, maps.geom.rows, maps.geom.cols, m, 0.0);
    decode(&peaks, maps, codec, ScoreMode::Raw)
        .into_iter()
        .map(|d| {
            let iou = best_iou(&d.bbox, gts);
            ConfidenceSample {
                batch,
                u: d.pixel.0,
                v: d.pixel.1,
                pred_box: d.bbox,
                peak_score: d.cls_score,
                iou_target: iou,
                c_target: iou_to_conf(iou),
            }
        })
        .collect()
}

/// Binary cross-entropy between the squashed confidence logits at the
/// sample pixels and the sample targets, averaged over samples. `logits`
/// is `(B, 1, L, W)`. No samples give a constant zero.
pub fn iou_conf_loss<T: Real>(tape: &mut Tape<T>, logits: Var, samples: &[ConfidenceSample]) -> Var {
    let x = tape.value(logits);
    let (rows, cols) = (x.dim(2), x.dim(3));
    let idx: Vec<(usize, T)> = samples
        .iter()
        .map(|s| ((s.batch * rows + s.u) * cols + s.v, T::lit(s.c_target)))
        .collect();
    let eps = T::lit(PROB_EPS);
    let mut total = T::zero();
    for &(i, c) in &idx {
        let p = sigmoid(x.data[i]).max(eps).min(T::one() - eps);
        total -= c * p.ln() + (T::one() - c) * (T::one() - p).ln();
    }
    let m = idx.len();
    let value = if m == 0 { T::zero() } else { total / T::lit(m as f64) };
    tape.push("iou_conf_loss", Tensor::scalar(value), &[logits], move |ctx| {
        let x = ctx.input(0);
        let mut g = Tensor::zeros(&x.shape);
        if m == 0 {
            return vec![Some(g)];
        }
        let scale = ctx.grad.item() / T::lit(m as f64);
        for &(i, c) in &idx {
            let s = sigmoid(x.data[i]);
            if s > eps && s < T::one() - eps {
                g.data[i] += (s - c) * scale;
            }
        }
        vec![Some(g)]
    })
}

/// Replace each detection's final score with the predicted confidence at
/// its peak pixel; the classification score is kept in `cls_score`.
pub fn recalibrate(dets: &mut [Detection], conf_map: &[f32], cols: usize) {
    for d in dets.iter_mut() {
        let c = conf_map[d.pixel.0 * cols + d.pixel.1];
        d.iou_conf = c;
        d.final_score = c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_op, GradcheckOpts};
    use crate::voxel_grid::{BevGeometry, VoxelGridSpec};

    fn sample(batch: usize, u: usize, v: usize, c: f64) -> ConfidenceSample {
        ConfidenceSample {
            batch,
            u,
            v,
            pred_box: Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0),
            peak_score: 0.5,
            iou_target: 0.0,
            c_target: c,
        }
    }

    #[test]
    fn conf_mapping_fixture() {
        for (iou, c) in [(0.25, 0.0), (0.5, 0.5), (0.6, 0.7), (0.75, 1.0)] {
            assert_eq!(iou_to_conf(iou), c);
        }
        assert_eq!(iou_to_conf(0.0), 0.0);
        assert_eq!(iou_to_conf(1.0), 1.0);
    }

    #[test]
    fn conf_mapping_monotone() {
        let mut prev = 0.0;
        for i in 0..=1000 {
            let c = iou_to_conf(i as f64 / 1000.0);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn loss_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let s = [sample(0, 0, 0, 0.0), sample(0, 1, 1, 1.0), sample(0, 0, 1, 0.3)];
        let l = iou_conf_loss(&mut tape, x, &s);
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 2], vec![-40.0, 40.0]));
        let l = iou_conf_loss(&mut tape, x, &[sample(0, 0, 0, 0.0), sample(0, 0, 1, 1.0)]);
        assert!(tape.value(l).item() < 2e-4);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let l = iou_conf_loss(&mut tape, x, &[]);
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(tape.backward(l).unwrap().of(&tape, x).data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_matches_scalar_formula_and_gradcheck() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = crate::gradcheck::random_tensor(&[2, 1, 3, 3], &mut rng);
        let samples: Vec<_> = (0..6)
            .map(|_| sample(rng.random_range(0..2), rng.random_range(0..3), rng.random_range(0..3), rng.random_range(0.0..1.0)))
            .collect();
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let l = iou_conf_loss(&mut tape, xv, &samples);
        let oracle: f64 = samples
            .iter()
            .map(|s| {
                let z = x.data[(s.batch * 3 + s.u) * 3 + s.v];
                let p = 1.0 / (1.0 + (-z).exp());
                -(s.c_target * p.ln() + (1.0 - s.c_target) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 6.0;
        assert!((tape.value(l).item() - oracle).abs() < 1e-12);
        let r = check_op(&[x], GradcheckOpts::default(), |t, v| iou_conf_loss(t, v[0], &samples));
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }

    #[test]
    fn recalibration_overrides_scores() {
        let geom = BevGeometry::new(&VoxelGridSpec::toy(), 8);
        let mk = |u, score| Detection {
            bbox: Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0),
            class_id: 0,
            cls_score: score,
            iou_conf: 0.0,
            final_score: score,
            pixel: (u, 0),
            clamped: false,
        };
        let mut dets = vec![mk(0, 0.9), mk(1, 0.6)];
        recalibrate(&mut dets, &vec![0.9f32; geom.rows * geom.cols], geom.cols);
        assert!(dets.iter().all(|d| d.final_score == 0.9));
        assert_eq!(dets[0].cls_score, 0.9);
        assert_eq!(dets[1].cls_score, 0.6);

        // ranking flips when the confidence disagrees with the peak score
        let mut conf = vec![0.0f32; geom.rows * geom.cols];
        conf[0] = 0.2;
        conf[geom.cols] = 0.8;
        let mut dets = vec![mk(0, 0.9), mk(1, 0.6)];
        recalibrate(&mut dets, &conf, geom.cols);
        assert!(dets[1].final_score > dets[0].final_score);
    }
}
