// SPDX-License-Identifier: Apache-2.0

use super::Detection;
use crate::data_ingest::{Box3D, Difficulty};
use crate::iou_conf::{iou_3d, iou_bev};

pub const RECALL_POSITIONS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Bev,
    ThreeD,
}

impl Metric {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            Metric::Bev => iou_bev(&a.bev(), &b.bev()),
            Metric::ThreeD => iou_3d(a, b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bev => "bev",
            Metric::ThreeD => "3d",
        }
    }
}

/// Interpolated precision at recall `i / 40`, `i = 1..=40`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub ap: f64,
    /// Raw (recall, precision) after each ranked detection.
    pub raw: Vec<(f64, f64)>,
}

/// Whether an object of difficulty `d` counts at evaluation `level`; the
/// levels are cumulative and unrated objects count everywhere.
pub fn in_level(d: Difficulty, level: Difficulty) -> bool {
    match d {
        Difficulty::Unrated => true,
        Difficulty::Beyond => false,
        _ => level == Difficulty::Unrated || d <= level,
    }
}

/// AP over all frames, every ground truth counted.
pub fn evaluate_ap(dets: &[Vec<Detection>], gts: &[Vec<Box3D>], iou_thresh: f64, metric: Metric) -> PrCurve {
    let ignore: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    evaluate_ap_filtered(dets, gts, &ignore, iou_thresh, metric)
}

/// AP with some ground truths marked as ignored: they are not counted as
/// positives and a detection matched to one is dropped from the ranking.
pub fn evaluate_ap_filtered(
    dets: &[Vec<Detection>],
    gts: &[Vec<Box3D>],
    ignore: &[Vec<bool>],
    iou_thresh: f64,
    metric: Metric,
) -> PrCurve {
    assert_eq!(dets.len(), gts.len(), "evaluate_ap: frame count mismatch");
    let n_pos: usize = ignore.iter().flatten().filter(|&&i| !i).count();
    // (score, is_tp) of every counted detection
    let mut ranked: Vec<(f32, bool)> = Vec::new();
    for ((fd, fg), fi) in dets.iter().zip(gts).zip(ignore) {
        let mut order: Vec<usize> = (0..fd.len()).collect();
        order.sort_by(|&a, &b| fd[b].final_score.total_cmp(&fd[a].final_score));
        let mut taken = vec![false; fg.len()];
        for i in order {
            let d = &fd[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in fg.iter().enumerate() {
                if taken[j] || g.class_id != d.class_id {
                    continue;
                }
                let iou = metric.iou(&d.bbox, g);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    if !fi[j] {
                        ranked.push((d.final_score, true));
                    }
                }
                None => ranked.push((d.final_score, false)),
            }
        }
    }
    let recall: Vec<f64> = (1..=RECALL_POSITIONS).map(|i| i as f64 / RECALL_POSITIONS as f64).collect();
    if n_pos == 0 {
        log::warn!("no ground-truth objects; AP is undefined");
        return PrCurve {
            precision: vec![f64::NAN; RECALL_POSITIONS],
            recall,
            ap: f64::NAN,
            raw: Vec::new(),
        };
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let raw: Vec<(f64, f64)> = ranked
        .iter()
        .map(|&(_, hit)| {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            (tp as f64 / n_pos as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect();
    let precision: Vec<f64> = recall
        .iter()
        .map(|&r| {
            raw.iter()
                .filter(|(rr, _)| *rr >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .collect();
    let ap = precision.iter().sum::<f64>() / RECALL_POSITIONS as f64;
    PrCurve { recall, precision, ap, raw }
}
