// SPDX-License-Identifier: Apache-2.0

//! KITTI velodyne `.bin`, label `.txt` and calibration files.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{normalize_angle, Box3D, Difficulty, Point, PointCloud, Scene};
use crate::error::{Error, Result};

const RECORD_BYTES: usize = 16;

pub fn read_kitti_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % RECORD_BYTES != 0 {
        let off = bytes.len() - bytes.len() % RECORD_BYTES;
        return Err(Error::Parse {
            path: path.to_path_buf(),
            location: format!("byte offset {off}"),
            msg: format!(
                "truncated record: file length {} is not a multiple of {RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let p = Point::new(f(0), f(1), f(2), f(3));
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.r.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                location: format!("byte offset {}", i * RECORD_BYTES),
                msg: "non-finite point value".into(),
            });
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn write_kitti_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.r] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rigid map from the rectified camera frame to the LiDAR frame:
/// `p_lidar = rot * p_cam + trans`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraToLidar {
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
}

impl Default for CameraToLidar {
    /// Axis permutation between camera (x right, y down, z forward) and
    /// LiDAR (x forward, y left, z up) with coincident origins.
    fn default() -> Self {
        Self {
            rot: [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]],
            trans: [0.0; 3],
        }
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn transpose(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

fn inverse(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    Some(inv)
}

impl CameraToLidar {
    pub fn cam_to_lidar(&self, p: [f64; 3]) -> [f64; 3] {
        let q = mat_vec(&self.rot, p);
        [q[0] + self.trans[0], q[1] + self.trans[1], q[2] + self.trans[2]]
    }

    pub fn lidar_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let inv = inverse(&self.rot).expect("camera-to-lidar rotation is singular");
        mat_vec(
            &inv,
            [p[0] - self.trans[0], p[1] - self.trans[1], p[2] - self.trans[2]],
        )
    }

    /// Convert a KITTI label (camera frame, bottom-center location) into a
    /// LiDAR box with a geometric center.
    pub fn object_to_box(&self, obj: &KittiObject, class_id: usize) -> Box3D {
        let [h, w, l] = obj.dims_hwl;
        let loc = obj.location;
        let center_cam = [loc[0], loc[1] - h / 2.0, loc[2]];
        let c = self.cam_to_lidar(center_cam);
        let (s, co) = obj.rotation_y.sin_cos();
        let d = mat_vec(&self.rot, [co, 0.0, -s]);
        Box3D::new(c[0], c[1], c[2], l, w, h, d[1].atan2(d[0]), class_id)
    }

    /// Inverse of [`Self::object_to_box`]: `(location, rotation_y)` in the
    /// camera frame, `rotation_y` wrapped into `(-pi, pi]`.
    pub fn box_to_camera(&self, b: &Box3D) -> ([f64; 3], f64) {
        let c = self.lidar_to_cam([b.x, b.y, b.z]);
        let loc = [c[0], c[1] + b.h / 2.0, c[2]];
        let inv = inverse(&self.rot).expect("camera-to-lidar rotation is singular");
        let (s, co) = b.theta.sin_cos();
        let d = mat_vec(&inv, [co, s, 0.0]);
        let mut ry = (-d[2]).atan2(d[0]);
        if ry <= -PI {
            ry += 2.0 * PI;
        }
        (loc, ry)
    }
}

fn parse_floats(path: &Path, line_no: usize, s: &str, n: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            location: format!("line {line_no}"),
            msg: format!("bad number: {e}"),
        })?;
    if vals.len() != n {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            location: format!("line {line_no}"),
            msg: format!("expected {n} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}

/// Read a KITTI `calib/*.txt` and compose `R0_rect` and `Tr_velo_to_cam`
/// into the rectified-camera to LiDAR transform.
pub fn read_kitti_calib(path: &Path) -> Result<CameraToLidar> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut r0, mut tr) = (None, None);
    for (i, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        match key.trim() {
            "R0_rect" => r0 = Some(parse_floats(path, i + 1, rest, 9)?),
            "Tr_velo_to_cam" => tr = Some(parse_floats(path, i + 1, rest, 12)?),
            _ => {}
        }
    }
    let missing = |k: &str| Error::Parse {
        path: path.to_path_buf(),
        location: "end of file".into(),
        msg: format!("missing `{k}` entry"),
    };
    let r0 = r0.ok_or_else(|| missing("R0_rect"))?;
    let tr = tr.ok_or_else(|| missing("Tr_velo_to_cam"))?;
    let r0m = [
        [r0[0], r0[1], r0[2]],
        [r0[3], r0[4], r0[5]],
        [r0[6], r0[7], r0[8]],
    ];
    let rv = [
        [tr[0], tr[1], tr[2]],
        [tr[4], tr[5], tr[6]],
        [tr[8], tr[9], tr[10]],
    ];
    let tv = [tr[3], tr[7], tr[11]];
    let r0_inv = inverse(&r0m).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        location: "R0_rect".into(),
        msg: "singular rectification matrix".into(),
    })?;
    let rvt = transpose(&rv);
    let rot = mat_mul(&rvt, &r0_inv);
    let t = mat_vec(&rvt, tv);
    Ok(CameraToLidar {
        rot,
        trans: [-t[0], -t[1], -t[2]],
    })
}

/// One line of a KITTI label or result file.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiObject {
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox: [f64; 4],
    pub dims_hwl: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    /// Present in detection results (16th field).
    pub score: Option<f64>,
}

impl KittiObject {
    fn parse(path: &Path, line_no: usize, line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                location: format!("line {line_no}"),
                msg: format!("expected 15 fields (16 with score), found {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                location: format!("line {line_no}, field {}", i + 1),
                msg: format!("bad number `{}`: {e}", fields[i]),
            })
        };
        Ok(Self {
            kind: fields[0].to_string(),
            truncated: num(1)?,
            occluded: num(2)? as i32,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            dims_hwl: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
            score: if fields.len() == 16 { Some(num(15)?) } else { None },
        })
    }
}

pub fn read_kitti_objects(path: &Path) -> Result<Vec<KittiObject>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| KittiObject::parse(path, i + 1, l))
        .collect()
}

/// Standard KITTI stratum from image-box height, occlusion and truncation.
pub fn difficulty_of(obj: &KittiObject) -> Difficulty {
    let height = obj.bbox[3] - obj.bbox[1];
    let (occ, trunc) = (obj.occluded, obj.truncated);
    if height >= 40.0 && occ <= 0 && trunc <= 0.15 {
        Difficulty::Easy
    } else if height >= 25.0 && occ <= 1 && trunc <= 0.30 {
        Difficulty::Moderate
    } else if height >= 25.0 && occ <= 2 && trunc <= 0.50 {
        Difficulty::Hard
    } else {
        Difficulty::Beyond
    }
}

/// Load one frame. Objects whose type is not in `classes` (including
/// `DontCare`) are dropped; the class id is the index into `classes`.
pub fn read_kitti_scene(
    bin_path: &Path,
    label_path: &Path,
    calib: Option<&CameraToLidar>,
    classes: &[String],
) -> Result<Scene> {
    let cloud = read_kitti_bin(bin_path)?;
    let objects = read_kitti_objects(label_path)?;
    let default = CameraToLidar::default();
    let calib = calib.unwrap_or(&default);
    let mut scene = Scene::new(
        bin_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        cloud,
        Vec::new(),
    );
    for obj in &objects {
        if obj.kind == "DontCare" {
            continue;
        }
        let Some(class_id) = classes.iter().position(|c| *c == obj.kind) else {
            continue;
        };
        scene.gt_boxes.push(calib.object_to_box(obj, class_id));
        scene.gt_difficulty.push(difficulty_of(obj));
    }
    Ok(scene)
}

/// One KITTI line for a LiDAR box. Numbers use the shortest representation
/// that parses back to the same `f64`.
pub fn format_kitti_line(
    b: &Box3D,
    class_name: &str,
    calib: &CameraToLidar,
    score: Option<f64>,
) -> String {
    let (loc, ry) = calib.box_to_camera(b);
    let mut s = String::new();
    if score.is_some() {
        write!(s, "{class_name} -1 -1 -10 -1 -1 -1 -1").unwrap();
    } else {
        write!(s, "{class_name} 0 0 0 0 0 0 0").unwrap();
    }
    write!(
        s,
        " {} {} {} {} {} {} {}",
        b.h, b.w, b.l, loc[0], loc[1], loc[2], ry
    )
    .unwrap();
    if let Some(sc) = score {
        write!(s, " {sc}").unwrap();
    }
    s
}

pub fn write_kitti_labels(
    path: &Path,
    boxes: &[Box3D],
    scores: Option<&[f64]>,
    classes: &[String],
    calib: &CameraToLidar,
) -> Result<()> {
    let mut text = String::new();
    for (i, b) in boxes.iter().enumerate() {
        let name = classes
            .get(b.class_id)
            .map(String::as_str)
            .unwrap_or("Unknown");
        text.push_str(&format_kitti_line(b, name, calib, scores.map(|s| s[i])));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Heading of a LiDAR box for a camera-frame yaw under the default calib.
pub fn heading_from_rotation_y(ry: f64) -> f64 {
    normalize_angle(-ry - FRAC_PI_2)
}
