// SPDX-License-Identifier: Apache-2.0

use super::Detection;
use crate::data_ingest::Box3D;
use crate::iou_conf::best_iou;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibStats {
    pub plcc: f64,
    pub srcc: f64,
    pub n: usize,
}

/// Pearson correlation; 0 (with a warning) when either side is constant
/// or fewer than two samples are given.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        log::warn!("correlation of fewer than two samples reported as 0");
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        log::warn!("zero variance in correlation input; reported as 0");
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// 1-based ranks, ties sharing their average rank.
pub fn ranks(a: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let mut r = vec![0.0; a.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && a[idx[j + 1]] == a[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Correlation between each detection's final score and its IoU with the
/// best-matching ground truth of its frame.
pub fn calibration_stats(dets: &[Vec<Detection>], gts: &[Vec<Box3D>]) -> CalibStats {
    let mut scores = Vec::new();
    let mut ious = Vec::new();
    for (fd, fg) in dets.iter().zip(gts) {
        for d in fd {
            scores.push(d.final_score as f64);
            ious.push(best_iou(&d.bbox, fg));
        }
    }
    CalibStats {
        plcc: pearson(&scores, &ious),
        srcc: spearman(&scores, &ious),
        n: scores.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_inverse() {
        let iou = [0.1, 0.5, 0.3, 0.9, 0.7];
        let inv: Vec<f64> = iou.iter().map(|v| 1.0 - v).collect();
        assert!((pearson(&iou, &iou) - 1.0).abs() < 1e-12);
        assert!((spearman(&iou, &iou) - 1.0).abs() < 1e-12);
        assert!((pearson(&iou, &inv) + 1.0).abs() < 1e-12);
        assert!((spearman(&iou, &inv) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&iou, &[0.5; 5]), 0.0);
    }

    #[test]
    fn average_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn stats_on_detections() {
        let g = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0, 0);
        let mk = |x: f64, s: f32| Detection {
            bbox: Box3D::new(x, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0, 0),
            class_id: 0,
            cls_score: s,
            iou_conf: s,
            final_score: s,
            pixel: (0, 0),
            clamped: false,
        };
        let s = calibration_stats(&[vec![mk(0.0, 0.9), mk(1.0, 0.5), mk(2.0, 0.2)]], &[vec![g]]);
        assert_eq!(s.n, 3);
        assert!((s.srcc - 1.0).abs() < 1e-12);
        assert!(s.plcc > 0.9);
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_maps(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..40)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let t: Vec<f64> = a.iter().map(|v| (3.0 * v).exp() + 2.0).collect();
            prop_assert!((spearman(&a, &b) - spearman(&t, &b)).abs() < 1e-12);
        }
    }
}
