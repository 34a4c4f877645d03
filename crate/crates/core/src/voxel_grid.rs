// SPDX-License-Identifier: Apache-2.0

//! Regular voxel grids, mean-feature voxelization and BEV map geometry.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data_ingest::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelGridSpec {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub d: [f64; 3],
    pub resolution: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(range_min: [f64; 3], range_max: [f64; 3], d: [f64; 3]) -> Result<Self> {
        let mut resolution = [0; 3];
        for i in 0..3 {
            if !(d[i] > 0.0) || !(range_max[i] > range_min[i]) {
                return Err(Error::Invalid(format!(
                    "voxel grid axis {i}: need d > 0 and max > min"
                )));
            }
            let r = (range_max[i] - range_min[i]) / d[i];
            if (r - r.round()).abs() > 1e-6 * r.max(1.0) {
                return Err(Error::Invalid(format!(
                    "voxel grid axis {i}: extent {} is not a multiple of {}",
                    range_max[i] - range_min[i],
                    d[i]
                )));
            }
            resolution[i] = r.round() as usize;
        }
        Ok(Self {
            range_min,
            range_max,
            d,
            resolution,
        })
    }

    pub fn kitti() -> Self {
        Self::new([0.0, -40.0, -3.0], [70.4, 40.0, 1.0], [0.05, 0.05, 0.1]).unwrap()
    }

    /// 64 x 64 x 16 voxels of 25 cm over a 16 m x 16 m x 4 m volume.
    pub fn toy() -> Self {
        Self::new([0.0, -8.0, -3.0], [16.0, 8.0, 1.0], [0.25, 0.25, 0.25]).unwrap()
    }

    /// Half-open membership `[min, max)` on every axis.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.range_min[i] && p[i] < self.range_max[i])
    }

    pub fn voxel_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        if !self.contains(p) {
            return None;
        }
        let mut v = [0; 3];
        for i in 0..3 {
            let f = ((p[i] - self.range_min[i]) / self.d[i]).floor() as usize;
            v[i] = f.min(self.resolution[i] - 1);
        }
        Some(v)
    }

    /// Metric lower corner of voxel `v`.
    pub fn voxel_min(&self, v: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| self.range_min[i] + v[i] as f64 * self.d[i])
    }
}

/// Batch-qualified voxel coordinate. Ordering is lexicographic in
/// `(b, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VoxelCoord {
    pub b: u32,
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl VoxelCoord {
    pub fn new(b: u32, x: u32, y: u32, z: u32) -> Self {
        Self { b, x, y, z }
    }
}

/// Active voxel sites with one feature row per site.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVolume<T> {
    /// Sorted and unique.
    pub coords: Vec<VoxelCoord>,
    /// `(N, C)`.
    pub feats: Tensor<T>,
    /// `(L, W, H)`.
    pub spatial_shape: [usize; 3],
    pub batch_size: usize,
}

impl<T: crate::real::Real> SparseVolume<T> {
    pub fn empty(spatial_shape: [usize; 3], channels: usize, batch_size: usize) -> Self {
        Self {
            coords: Vec::new(),
            feats: Tensor::zeros(&[0, channels]),
            spatial_shape,
            batch_size,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.shape[1]
    }

    pub fn feat(&self, i: usize) -> &[T] {
        let c = self.channels();
        &self.feats.data[i * c..(i + 1) * c]
    }

    /// Concatenate single-scene volumes into one batch; the `i`-th volume
    /// gets batch index `i`.
    pub fn batch(vols: &[SparseVolume<T>]) -> Self {
        assert!(!vols.is_empty());
        let shape = vols[0].spatial_shape;
        let c = vols[0].channels();
        let mut coords = Vec::new();
        let mut data = Vec::new();
        for (b, v) in vols.iter().enumerate() {
            assert_eq!(v.spatial_shape, shape);
            assert_eq!(v.channels(), c);
            coords.extend(v.coords.iter().map(|k| VoxelCoord { b: b as u32, ..*k }));
            data.extend_from_slice(&v.feats.data);
        }
        let n = coords.len();
        Self {
            coords,
            feats: Tensor::from_vec(&[n, c], data),
            spatial_shape: shape,
            batch_size: vols.len(),
        }
    }

    pub fn cast<U: crate::real::Real>(&self) -> SparseVolume<U> {
        SparseVolume {
            coords: self.coords.clone(),
            feats: self.feats.cast(),
            spatial_shape: self.spatial_shape,
            batch_size: self.batch_size,
        }
    }
}

fn group_points(
    cloud: &PointCloud,
    spec: &VoxelGridSpec,
) -> Result<BTreeMap<VoxelCoord, Vec<Point>>> {
    let mut cells: BTreeMap<VoxelCoord, Vec<Point>> = BTreeMap::new();
    for p in &cloud.points {
        let v = spec
            .voxel_of(p.xyz())
            .ok_or(Error::OutOfRange { point: [p.x, p.y, p.z] })?;
        cells
            .entry(VoxelCoord::new(0, v[0] as u32, v[1] as u32, v[2] as u32))
            .or_default()
            .push(*p);
    }
    Ok(cells)
}

fn mean_feature(pts: &mut [Point]) -> [f32; 4] {
    // Summation order fixed by sorting so the result ignores input order.
    pts.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.z.total_cmp(&b.z))
            .then(a.r.total_cmp(&b.r))
    });
    let mut s = [0.0f64; 4];
    for p in pts.iter() {
        s[0] += p.x as f64;
        s[1] += p.y as f64;
        s[2] += p.z as f64;
        s[3] += p.r as f64;
    }
    let n = pts.len() as f64;
    s.map(|v| (v / n) as f32)
}

/// Voxelize a range-cropped cloud; also returns the point count per voxel.
pub fn voxelize_with_counts(
    cloud: &PointCloud,
    spec: &VoxelGridSpec,
) -> Result<(SparseVolume<f32>, Vec<usize>)> {
    let cells = group_points(cloud, spec)?;
    let mut coords = Vec::with_capacity(cells.len());
    let mut counts = Vec::with_capacity(cells.len());
    let mut data = Vec::with_capacity(cells.len() * 4);
    for (k, mut pts) in cells {
        coords.push(k);
        counts.push(pts.len());
        data.extend_from_slice(&mean_feature(&mut pts));
    }
    let n = coords.len();
    Ok((
        SparseVolume {
            coords,
            feats: Tensor::from_vec(&[n, 4], data),
            spatial_shape: spec.resolution,
            batch_size: 1,
        },
        counts,
    ))
}

/// One active voxel per occupied cell with the mean `(x, y, z, r)` of its
/// points as feature; coordinates sorted lexicographically.
pub fn voxelize(cloud: &PointCloud, spec: &VoxelGridSpec) -> Result<SparseVolume<f32>> {
    voxelize_with_counts(cloud, spec).map(|(v, _)| v)
}

/// Text dump, one voxel per line: `ix iy iz f0 f1 f2 f3`.
pub fn dump_voxels(vol: &SparseVolume<f32>) -> String {
    let mut s = String::new();
    for (i, k) in vol.coords.iter().enumerate() {
        write!(s, "{} {} {}", k.x, k.y, k.z).unwrap();
        for f in vol.feat(i) {
            write!(s, " {f}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Placement of a BEV grid in the LiDAR frame. Row `u` runs along x and
/// column `v` along y.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGeometry {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub origin: [f64; 2],
    pub cell: [f64; 2],
}

impl BevGeometry {
    pub fn new(spec: &VoxelGridSpec, stride: usize) -> Self {
        Self {
            rows: spec.resolution[0].div_ceil(stride),
            cols: spec.resolution[1].div_ceil(stride),
            stride,
            origin: [spec.range_min[0], spec.range_min[1]],
            cell: [spec.d[0] * stride as f64, spec.d[1] * stride as f64],
        }
    }

    pub fn cell_center(&self, u: usize, v: usize) -> [f64; 2] {
        [
            self.origin[0] + (u as f64 + 0.5) * self.cell[0],
            self.origin[1] + (v as f64 + 0.5) * self.cell[1],
        ]
    }

    /// Continuous pixel coordinates of a metric point.
    pub fn to_pixel(&self, x: f64, y: f64) -> [f64; 2] {
        [
            (x - self.origin[0]) / self.cell[0],
            (y - self.origin[1]) / self.cell[1],
        ]
    }

    pub fn to_metric(&self, pu: f64, pv: f64) -> [f64; 2] {
        [
            pu * self.cell[0] + self.origin[0],
            pv * self.cell[1] + self.origin[1],
        ]
    }
}

/// Dense `(C, L, W)` grid over a [`BevGeometry`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBevMap {
    pub channels: usize,
    pub geom: BevGeometry,
    pub data: Vec<f32>,
}

impl DenseBevMap {
    pub fn zeros(channels: usize, geom: BevGeometry) -> Self {
        Self {
            channels,
            geom,
            data: vec![0.0; channels * geom.rows * geom.cols],
        }
    }

    pub fn at(&self, c: usize, u: usize, v: usize) -> f32 {
        self.data[(c * self.geom.rows + u) * self.geom.cols + v]
    }

    pub fn at_mut(&mut self, c: usize, u: usize, v: usize) -> &mut f32 {
        &mut self.data[(c * self.geom.rows + u) * self.geom.cols + v]
    }

    /// Channel-major slice of one channel.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.geom.rows * self.geom.cols;
        &self.data[c * n..(c + 1) * n]
    }
}

/// 1 where any height bin of a column is active (batch 0 only).
pub fn occupancy_bev(vol: &SparseVolume<f32>, geom: BevGeometry) -> DenseBevMap {
    let mut m = DenseBevMap::zeros(1, geom);
    for k in vol.coords.iter().filter(|k| k.b == 0) {
        *m.at_mut(0, k.x as usize, k.y as usize) = 1.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_resolution() {
        assert_eq!(VoxelGridSpec::kitti().resolution, [1408, 1600, 40]);
        assert_eq!(VoxelGridSpec::toy().resolution, [64, 64, 16]);
        assert!(VoxelGridSpec::new([0.0; 3], [1.0; 3], [0.3, 0.5, 0.5]).is_err());
        assert!(VoxelGridSpec::new([0.0; 3], [1.0; 3], [0.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn single_point_voxel() {
        let spec = VoxelGridSpec::toy();
        let p = Point::new(0.125, -7.875, -2.875, 0.7);
        let v = voxelize(&PointCloud::new(vec![p]), &spec).unwrap();
        assert_eq!(v.coords, vec![VoxelCoord::new(0, 0, 0, 0)]);
        assert_eq!(v.feat(0), &[p.x, p.y, p.z, p.r]);
    }

    #[test]
    fn two_points_mean() {
        let spec = VoxelGridSpec::toy();
        let cloud = PointCloud::new(vec![
            Point::new(1.1, 0.1, 0.1, 0.2),
            Point::new(1.2, 0.2, 0.2, 0.4),
        ]);
        let v = voxelize(&cloud, &spec).unwrap();
        assert_eq!(v.len(), 1);
        assert!((v.feat(0)[3] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn out_of_range_is_error() {
        let cloud = PointCloud::new(vec![Point::new(16.0, 0.0, 0.0, 0.0)]);
        assert!(matches!(
            voxelize(&cloud, &VoxelGridSpec::toy()),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn occupancy_cases() {
        let spec = VoxelGridSpec::toy();
        let geom = BevGeometry::new(&spec, 1);
        let empty = SparseVolume::<f32>::empty(spec.resolution, 4, 1);
        assert!(occupancy_bev(&empty, geom).data.iter().all(|&x| x == 0.0));
        for k in [0, 7, 15] {
            let mut v = SparseVolume::<f32>::empty(spec.resolution, 4, 1);
            v.coords.push(VoxelCoord::new(0, 3, 5, k));
            v.feats = Tensor::zeros(&[1, 4]);
            let m = occupancy_bev(&v, geom);
            assert_eq!(m.data.iter().filter(|&&x| x != 0.0).count(), 1);
            assert_eq!(m.at(0, 3, 5), 1.0);
        }
    }

    #[test]
    fn dump_format() {
        let spec = VoxelGridSpec::toy();
        let v = voxelize(&PointCloud::new(vec![Point::new(0.125, -7.875, -2.875, 0.5)]), &spec).unwrap();
        assert_eq!(dump_voxels(&v), "0 0 0 0.125 -7.875 -2.875 0.5\n");
    }

    #[test]
    fn bev_geometry() {
        let g = BevGeometry::new(&VoxelGridSpec::kitti(), 8);
        assert_eq!((g.rows, g.cols), (176, 200));
        assert!((g.cell[0] - 0.4).abs() < 1e-12);
        let t = BevGeometry::new(&VoxelGridSpec::toy(), 8);
        assert_eq!((t.rows, t.cols), (8, 8));
        assert_eq!(t.cell_center(0, 0), [1.0, -7.0]);
    }
}
