// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write as _;
use std::path::Path;

use super::{Detection, PrCurve};
use crate::data_ingest::{read_kitti_objects, write_kitti_labels, CameraToLidar};
use crate::error::{Error, Result};

/// KITTI result file with one line per detection and its final score.
pub fn write_detections(path: &Path, dets: &[Detection], classes: &[String], calib: &CameraToLidar) -> Result<()> {
    let boxes: Vec<_> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.final_score as f64).collect();
    write_kitti_labels(path, &boxes, Some(&scores), classes, calib)
}

/// Read a KITTI result file back. Lines of unknown classes are skipped; a
/// missing score is an error.
pub fn read_detections(path: &Path, classes: &[String], calib: &CameraToLidar) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, obj) in read_kitti_objects(path)?.iter().enumerate() {
        let Some(class_id) = classes.iter().position(|c| *c == obj.kind) else {
            continue;
        };
        let score = obj.score.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            location: format!("object {}", i + 1),
            msg: "detection without score".into(),
        })? as f32;
        out.push(Detection {
            bbox: calib.object_to_box(obj, class_id),
            class_id,
            cls_score: score,
            iou_conf: score,
            final_score: score,
            pixel: (0, 0),
            clamped: false,
        });
    }
    Ok(out)
}

/// `key=value` lines.
pub fn metrics_report(items: &[(String, f64)]) -> String {
    let mut s = String::new();
    for (k, v) in items {
        writeln!(s, "{k}={v}").unwrap();
    }
    s
}

/// Standalone SVG with one interpolated PR curve per entry.
pub fn pr_curve_svg(curves: &[(String, PrCurve)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 48.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let px = |r: f64| M + r * (W - 2.0 * M);
    let py = |p: f64| H - M - p * (H - 2.0 * M);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{} {} L{} {} L{} {}" fill="none" stroke="black"/>"#,
        px(0.0),
        py(1.0),
        px(0.0),
        py(0.0),
        px(1.0),
        py(0.0)
    )
    .unwrap();
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{v}</text>"#, px(v), py(0.0) + 16.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v}</text>"#, px(0.0) - 6.0, py(v) + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">recall</text>"#, W / 2.0, H - 10.0).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">precision</text>"#,
        H / 2.0,
        H / 2.0
    )
    .unwrap();
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = c
            .recall
            .iter()
            .zip(&c.precision)
            .map(|(r, p)| format!("{:.2},{:.2}", px(*r), py(if p.is_finite() { *p } else { 0.0 })))
            .collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" ")).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{} (AP {:.4})</text>"#,
            px(0.55),
            M + 16.0 * (i as f64 + 1.0),
            name,
            c.ap
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
