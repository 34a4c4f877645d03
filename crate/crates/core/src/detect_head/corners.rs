// SPDX-License-Identifier: Apache-2.0

use crate::data_ingest::Box3D;

/// Sign of corner `k` along the box axes: bit 0 selects `+-l/2`, bit 1
/// `+-w/2`, bit 2 `+-h/2` (set bit = negative).
pub fn corner_signs(k: usize) -> [f64; 3] {
    [0, 1, 2].map(|b| if k >> b & 1 == 0 { 1.0 } else { -1.0 })
}

/// Corners in canonical order, in the LiDAR frame.
pub fn corners_of(b: &Box3D) -> [[f64; 3]; 8] {
    corners_raw(b.x, b.y, b.z, b.l, b.w, b.h, b.theta)
}

/// Same as [`corners_of`] without the validity normalisation of
/// [`Box3D::new`]; sizes may be negative during training.
#[allow(clippy::too_many_arguments)]
pub fn corners_raw(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> [[f64; 3]; 8] {
    let (s, c) = theta.sin_cos();
    let mut out = [[0.0; 3]; 8];
    for (k, o) in out.iter_mut().enumerate() {
        let sg = corner_signs(k);
        let (a, b) = (sg[0] * l / 2.0, sg[1] * w / 2.0);
        *o = [x + c * a - s * b, y + s * a + c * b, z + sg[2] * h / 2.0];
    }
    out
}
