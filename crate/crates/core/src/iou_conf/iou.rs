// SPDX-License-Identifier: Apache-2.0

//! Rotated-rectangle intersection by convex polygon clipping, and the
//! derived BEV and 3D IoU.

use crate::data_ingest::Box3D;

/// BEV footprint: center, length along the heading, width across it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotatedRect {
    pub cx: f64,
    pub cy: f64,
    pub l: f64,
    pub w: f64,
    pub theta: f64,
}

impl RotatedRect {
    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)]
            .map(|(a, b)| [self.cx + c * a - s * b, self.cy + s * a + c * b])
    }

    pub fn area(&self) -> f64 {
        self.l * self.w
    }

    /// Closed point-in-rectangle test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (c * dx + s * dy).abs() <= self.l / 2.0 && (-s * dx + c * dy).abs() <= self.w / 2.0
    }

    fn key(&self) -> [u64; 5] {
        [self.cx, self.cy, self.l, self.w, self.theta].map(f64::to_bits)
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Clip a convex polygon against the half-plane left of the directed edge
/// `p -> q`.
fn clip(poly: &[[f64; 2]], p: [f64; 2], q: [f64; 2]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let cur = poly[i];
        let prev = poly[(i + poly.len() - 1) % poly.len()];
        let dc = cross(p, q, cur);
        let dp = cross(p, q, prev);
        if dc >= 0.0 {
            if dp < 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
            out.push(cur);
        } else if dp >= 0.0 {
            out.push(intersect(prev, cur, dp, dc));
        }
    }
    out
}

fn intersect(a: [f64; 2], b: [f64; 2], da: f64, db: f64) -> [f64; 2] {
    let t = da / (da - db);
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        s += a[0] * b[1] - a[1] * b[0];
    }
    (s / 2.0).abs()
}

/// Area of the intersection of two rotated rectangles. The arguments are
/// put in a canonical order first so the result is bitwise symmetric.
pub fn bev_intersection_area(a: &RotatedRect, b: &RotatedRect) -> f64 {
    let (a, b) = if a.key() <= b.key() { (a, b) } else { (b, a) };
    // quick reject on circumscribed circles
    let ra = a.l.hypot(a.w) / 2.0;
    let rb = b.l.hypot(b.w) / 2.0;
    if (a.cx - b.cx).hypot(a.cy - b.cy) >= ra + rb {
        return 0.0;
    }
    let mut poly = a.corners().to_vec();
    let cb = b.corners();
    for i in 0..4 {
        poly = clip(&poly, cb[i], cb[(i + 1) % 4]);
        if poly.is_empty() {
            return 0.0;
        }
    }
    polygon_area(&poly).min(a.area()).min(b.area())
}

pub fn iou_bev(a: &RotatedRect, b: &RotatedRect) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn z_overlap(a: &Box3D, b: &Box3D) -> f64 {
    let top = (a.z + a.h / 2.0).min(b.z + b.h / 2.0);
    let bottom = (a.z - a.h / 2.0).max(b.z - b.h / 2.0);
    (top - bottom).max(0.0)
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let dz = z_overlap(a, b);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(&a.bev(), &b.bev()) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn sq(cx: f64, theta: f64) -> RotatedRect {
        RotatedRect {
            cx,
            cy: 0.0,
            l: 1.0,
            w: 1.0,
            theta,
        }
    }

    #[test]
    fn identical_is_one() {
        let r = RotatedRect { cx: 1.0, cy: 2.0, l: 4.0, w: 1.7, theta: 0.3 };
        assert!((iou_bev(&r, &r) - 1.0).abs() < 1e-12);
        let b = Box3D::new(1.0, 2.0, -1.0, 4.0, 1.7, 1.5, 0.3, 0);
        assert!((iou_3d(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_offset_squares() {
        assert!((iou_bev(&sq(0.0, 0.0), &sq(0.5, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_square() {
        let v = iou_bev(&sq(0.0, 0.0), &sq(0.0, FRAC_PI_4));
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        assert!((v - inter / (2.0 - inter)).abs() < 1e-12);
        assert!((bev_intersection_area(&sq(0.0, 0.0), &sq(0.0, FRAC_PI_4)) - inter).abs() < 1e-12);
    }

    #[test]
    fn disjoint_and_stacked() {
        assert_eq!(iou_bev(&sq(0.0, 0.0), &sq(3.0, 0.0)), 0.0);
        let a = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0, 0);
        let b = Box3D::new(0.0, 0.0, 1.0, 2.0, 2.0, 1.0, 0.0, 0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn contained_rect() {
        let big = RotatedRect { cx: 0.0, cy: 0.0, l: 4.0, w: 4.0, theta: 0.2 };
        let small = RotatedRect { cx: 0.1, cy: 0.0, l: 1.0, w: 1.0, theta: 1.0 };
        assert!((iou_bev(&big, &small) - 1.0 / 16.0).abs() < 1e-12);
    }
}
