// SPDX-License-Identifier: Apache-2.0

//! Runtime self-checks: gradient checks of every differentiable op and of
//! a micro model, IoU against rasterization, sparse conv against a dense
//! reference, target round trips, peak extraction, the confidence mapping
//! and the AP evaluator.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adfa::{attention_gate, deform_conv, flatten_height, mask_focal_loss};
use crate::data_ingest::Box3D;
use crate::decoder_eval::{decode, evaluate_ap, extract_peaks, Detection, HeadMaps, Metric, Peak, ScoreMode};
use crate::detect_head::{build_targets, center_l1_loss, cls_focal_loss, corner_loss, rot_loss, BoxMaps, Pix, RotBinCodec};
use crate::gradcheck::{check_op, check_params, random_tensor, GradcheckOpts, GradcheckReport};
use crate::iou_conf::{iou_3d, iou_bev, iou_conf_loss, iou_to_conf, ConfidenceSample};
use crate::nn::Fwd;
use crate::ops::{batch_norm, conv2d, conv_transpose2d, BnMode, Conv2dSpec};
use crate::params::ParamStore;
use crate::sparse_backbone::{build_rulebook, sparse_conv, tap_offset, SparseConvKind, SparseVar};
use crate::tensor::Tensor;
use crate::train_harness::{Config, Detector, ModelConfig};
use crate::voxel_grid::{BevGeometry, SparseVolume, VoxelCoord, VoxelGridSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub const OP_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;

fn grad_check(name: &str, r: GradcheckReport, tol: f64) -> Check {
    Check::new(
        format!("gradcheck {name}"),
        r.max_rel_err <= tol,
        format!("max rel err {:.2e} over {} entries", r.max_rel_err, r.checked),
    )
}

/// Random sorted unique voxel sites, each kept with probability `density`.
pub fn random_coords<R: Rng>(rng: &mut R, shape: [usize; 3], batch: usize, density: f64) -> Vec<VoxelCoord> {
    let mut out = Vec::new();
    for b in 0..batch {
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    if rng.random_bool(density) {
                        out.push(VoxelCoord::new(b as u32, x as u32, y as u32, z as u32));
                    }
                }
            }
        }
    }
    out
}

/// One gradient check per differentiable op.
pub fn op_gradchecks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o = GradcheckOpts::default();
    let mut out = Vec::new();

    for kind in [SparseConvKind::Submanifold, SparseConvKind::Strided] {
        let coords = random_coords(&mut rng, [4, 4, 4], 1, 0.4);
        let rb = Arc::new(build_rulebook(&coords, [4, 4, 4], kind));
        let x = random_tensor(&[coords.len(), 2], &mut rng);
        let w = random_tensor(&[27, 2, 3], &mut rng);
        let b = random_tensor(&[3], &mut rng);
        let r = check_op(&[x, w, b], o, |t, v| sparse_conv(t, v[0], v[1], Some(v[2]), rb.clone()));
        out.push(grad_check(&format!("sparse conv ({kind:?})"), r, OP_TOL));
    }

    let coords = random_coords(&mut rng, [3, 3, 2], 2, 0.5);
    let feats = random_tensor(&[coords.len(), 2], &mut rng);
    let r = check_op(&[feats], o, |t, v| {
        let sv = SparseVar {
            coords: coords.clone(),
            feats: v[0],
            spatial_shape: [3, 3, 2],
            batch_size: 2,
        };
        flatten_height(t, &sv)
    });
    out.push(grad_check("height flatten", r, OP_TOL));

    let x = random_tensor(&[2, 2, 5, 4], &mut rng);
    let w = random_tensor(&[3, 2, 3, 3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    for (name, spec) in [("conv2d 3x3", Conv2dSpec::SAME3), ("conv2d stride 2", Conv2dSpec::DOWN3)] {
        let r = check_op(&[x.clone(), w.clone(), b.clone()], o, |t, v| conv2d(t, v[0], v[1], Some(v[2]), spec));
        out.push(grad_check(name, r, OP_TOL));
    }
    let wt = random_tensor(&[2, 3, 2, 2], &mut rng);
    let r = check_op(&[x.clone(), wt, b.clone()], o, |t, v| conv_transpose2d(t, v[0], v[1], v[2], (9, 8)));
    out.push(grad_check("transposed conv", r, OP_TOL));

    let gamma = random_tensor(&[2], &mut rng);
    let beta = random_tensor(&[2], &mut rng);
    for mode in [BnMode::Train, BnMode::Eval] {
        let (rm, rv) = (vec![0.1, -0.2], vec![0.7, 1.4]);
        let r = check_op(&[x.clone(), gamma.clone(), beta.clone()], o, |t, v| {
            batch_norm(t, v[0], v[1], v[2], (&rm, &rv), mode).0
        });
        out.push(grad_check(&format!("batch norm ({mode:?})"), r, OP_TOL));
    }

    let off = random_tensor(&[2, 18, 5, 4], &mut rng).map(|v| 1.7 * v);
    let m = random_tensor(&[2, 9, 5, 4], &mut rng).map(|v| 0.5 + 0.4 * v);
    let r = check_op(&[x.clone(), off, m, w.clone(), b.clone()], o, |t, v| {
        deform_conv(t, v[0], v[1], v[2], v[3], Some(v[4]))
    });
    out.push(grad_check("deformable conv", r, OP_TOL));

    let logits = random_tensor(&[2, 1, 5, 4], &mut rng).map(|v| 3.0 * v);
    let r = check_op(&[x.clone(), logits.clone()], o, |t, v| attention_gate(t, v[0], v[1]));
    out.push(grad_check("attention gate", r, OP_TOL));

    let mask: Vec<f64> = (0..40).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let r = check_op(&[logits.clone()], o, |t, v| mask_focal_loss(t, v[0], &mask));
    out.push(grad_check("mask focal loss", r, OP_TOL));

    let cls = random_tensor(&[2, 2, 5, 4], &mut rng).map(|v| 2.0 * v);
    let heat: Vec<f64> = (0..80)
        .map(|i| if i % 17 == 0 { 1.0 } else { rng.random_range(0.0..0.9) })
        .collect();
    let r = check_op(&[cls], o, |t, v| cls_focal_loss(t, v[0], &heat, 5));
    out.push(grad_check("classification focal loss", r, OP_TOL));

    let pix: Vec<Pix> = (0..3).map(|i| Pix { b: i % 2, u: i + 1, v: 3 - i }).collect();
    let pred = random_tensor(&[2, 3, 5, 4], &mut rng);
    let l1: Vec<(Pix, Vec<f64>)> = pix
        .iter()
        .map(|p| (*p, (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let r = check_op(&[pred], o, |t, v| center_l1_loss(t, v[0], &l1, 3));
    out.push(grad_check("L1 regression loss", r, OP_TOL));

    let bins = random_tensor(&[2, 12, 5, 4], &mut rng);
    let res = random_tensor(&[2, 12, 5, 4], &mut rng);
    let rt: Vec<(Pix, usize, f64)> = pix
        .iter()
        .map(|p| (*p, rng.random_range(0..12), rng.random_range(-1.0..1.0)))
        .collect();
    let r = check_op(&[bins.clone(), res.clone()], o, |t, v| rot_loss(t, v[0], v[1], &rt, 3));
    out.push(grad_check("rotation loss", r, OP_TOL));

    let spec = VoxelGridSpec::toy();
    let geom = BevGeometry::new(&spec, 8);
    let codec = RotBinCodec::default();
    let maps = vec![
        random_tensor(&[2, 2, 5, 4], &mut rng).map(|v| 0.5 + 0.4 * v),
        random_tensor(&[2, 1, 5, 4], &mut rng),
        random_tensor(&[2, 3, 5, 4], &mut rng).map(|v| 2.0 + v),
        bins,
        res,
    ];
    let entries: Vec<(Pix, Box3D)> = pix
        .iter()
        .map(|p| {
            let c = geom.cell_center(p.u, p.v);
            (*p, Box3D::new(c[0] + 0.3, c[1] - 0.2, -1.0, 4.0, 1.7, 1.5, rng.random_range(0.0..6.0), 0))
        })
        .collect();
    let r = check_op(&maps, o, |t, v| {
        let m = BoxMaps {
            offset: v[0],
            z: v[1],
            size: v[2],
            rot_bin: v[3],
            rot_res: v[4],
        };
        corner_loss(t, m, &entries, &geom, &codec, 3)
    });
    out.push(grad_check("corner loss", r, OP_TOL));

    let samples: Vec<ConfidenceSample> = pix
        .iter()
        .map(|p| {
            let iou = rng.random_range(0.0..1.0);
            ConfidenceSample {
                batch: p.b,
                u: p.u,
                v: p.v,
                pred_box: Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0),
                peak_score: 0.5,
                iou_target: iou,
                c_target: iou_to_conf(iou),
            }
        })
        .collect();
    let r = check_op(&[logits], o, |t, v| iou_conf_loss(t, v[0], &samples));
    out.push(grad_check("IoU confidence loss", r, OP_TOL));
    out
}

/// The micro configuration: an 8^3 grid over 2 m with every width 2,
/// so the BEV map is a single cell.
pub fn micro_config() -> Config {
    Config {
        range_min: [0.0, 0.0, 0.0],
        range_max: [2.0, 2.0, 2.0],
        voxel_size: [0.25, 0.25, 0.25],
        backbone_channels: [2, 2, 2, 2],
        tower_channels: 2,
        n_lvl: 1,
        c2: 2,
        attention_channels: 2,
        head_channels: 2,
        rot_bins: 4,
        size_prior: [1.5, 0.8, 0.8],
        conf_samples: 1,
        ..Config::toy()
    }
}

/// Perturb every parameter so no branch sits at its special initial
/// value: zero offsets land exactly on bilinear kinks.
pub fn randomize_params<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R) {
    for p in store.iter_mut() {
        let name = p.name.clone();
        for v in p.value.data.iter_mut() {
            *v = if name.ends_with(".running_var") || name.ends_with(".gamma") {
                rng.random_range(0.5..1.5)
            } else if name.ends_with(".running_mean") {
                rng.random_range(-0.3..0.3)
            } else {
                *v + rng.random_range(-0.3..0.3)
            };
        }
    }
}

/// End-to-end gradient check of the total training loss of the micro
/// model with respect to every trainable parameter, batch norm in eval
/// mode.
pub fn micro_model_gradcheck(seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = micro_config();
    let mcfg = ModelConfig::from_config(&cfg).expect("micro config is valid");
    let mut store = ParamStore::<f64>::new();
    let det = Detector::new(&mut store, &mut rng, mcfg.clone());
    randomize_params(&mut store, &mut rng);

    let shape = mcfg.grid.resolution;
    let coords = random_coords(&mut rng, shape, 2, 0.08);
    let n = coords.len();
    let input = SparseVolume {
        feats: random_tensor(&[n, 4], &mut rng),
        coords,
        spatial_shape: shape,
        batch_size: 2,
    };
    let geom = mcfg.geometry();
    let codec = det.codec();
    let gts = vec![
        vec![Box3D::new(1.1, 0.9, 1.0, 1.5, 0.8, 0.8, 0.4, 0)],
        vec![Box3D::new(0.8, 1.2, 0.9, 1.2, 0.7, 0.9, 2.5, 0)],
    ];
    let bundles: Vec<_> = gts.iter().map(|g| build_targets(g, 1, &geom, &codec)).collect();
    let samples = {
        let mut f = Fwd::new(&store, BnMode::Eval);
        let out = det.forward(&mut f, &input, false);
        det.confidence_samples(&f.tape, &out, &gts, cfg.conf_samples)
    };
    check_params(&mut store, BnMode::Eval, GradcheckOpts::default(), |f| {
        let out = det.forward(f, &input, false);
        det.losses(&mut f.tape, &out, &bundles, &samples, [1.0; 5]).total
    })
}

fn raster_iou_bev(a: &Box3D, b: &Box3D, res: usize) -> f64 {
    let (ra, rb) = (a.bev(), b.bev());
    let pts: Vec<[f64; 2]> = ra.corners().into_iter().chain(rb.corners()).collect();
    let lo = [0, 1].map(|k| pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min));
    let hi = [0, 1].map(|k| pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max));
    let step = [(hi[0] - lo[0]) / res as f64, (hi[1] - lo[1]) / res as f64];
    let (mut inter, mut uni) = (0usize, 0usize);
    for i in 0..res {
        for j in 0..res {
            let x = lo[0] + (i as f64 + 0.5) * step[0];
            let y = lo[1] + (j as f64 + 0.5) * step[1];
            let (ia, ib) = (ra.contains(x, y), rb.contains(x, y));
            inter += (ia && ib) as usize;
            uni += (ia || ib) as usize;
        }
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

pub fn random_box<R: Rng>(rng: &mut R) -> Box3D {
    Box3D::new(
        rng.random_range(-1.5..1.5),
        rng.random_range(-1.5..1.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(0.5..4.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.0..std::f64::consts::TAU),
        0,
    )
}

/// Analytic BEV IoU against a rasterized estimate, symmetry, and
/// invariance under a rigid motion of both boxes.
pub fn iou_checks(seed: u64, pairs: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut asym, mut drift) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..pairs {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        worst = worst.max((iou_bev(&a.bev(), &b.bev()) - raster_iou_bev(&a, &b, 400)).abs());
        asym = asym.max((iou_3d(&a, &b) - iou_3d(&b, &a)).abs());
        let (phi, t): (f64, [f64; 3]) = (rng.random_range(0.0..6.0), [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), 1.0]);
        let mv = |x: &Box3D| {
            let (s, c) = phi.sin_cos();
            Box3D::new(c * x.x - s * x.y + t[0], s * x.x + c * x.y + t[1], x.z + t[2], x.l, x.w, x.h, x.theta + phi, 0)
        };
        drift = drift.max((iou_3d(&a, &b) - iou_3d(&mv(&a), &mv(&b))).abs());
    }
    vec![
        Check::new("IoU vs rasterization", worst <= 0.02, format!("max |diff| {worst:.4} over {pairs} pairs")),
        Check::new("IoU symmetry", asym == 0.0, format!("max asymmetry {asym:.2e}")),
        Check::new("IoU rigid invariance", drift <= 1e-6, format!("max drift {drift:.2e}")),
    ]
}

fn dense_conv3d(coords: &[VoxelCoord], x: &Tensor<f32>, w: &Tensor<f32>, shape: [usize; 3], out: &VoxelCoord, stride: i64) -> Vec<f64> {
    let (ci, co) = (w.dim(1), w.dim(2));
    let mut acc = vec![0.0f64; co];
    for k in 0..27 {
        let d = tap_offset(k);
        let p = [
            out.x as i64 * stride + d[0],
            out.y as i64 * stride + d[1],
            out.z as i64 * stride + d[2],
        ];
        if (0..3).any(|a| p[a] < 0 || p[a] >= shape[a] as i64) {
            continue;
        }
        let key = VoxelCoord::new(out.b, p[0] as u32, p[1] as u32, p[2] as u32);
        if let Ok(i) = coords.binary_search(&key) {
            for (o, a) in acc.iter_mut().enumerate() {
                for c in 0..ci {
                    *a += x.data[i * ci + c] as f64 * w.data[(k * ci + c) * co + o] as f64;
                }
            }
        }
    }
    acc
}

/// Sparse convolution against direct dense summation on an 8^3 grid.
pub fn sparse_conv_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [8, 8, 8];
    let coords = random_coords(&mut rng, shape, 2, 0.2);
    let x = random_tensor(&[coords.len(), 3], &mut rng).cast::<f32>();
    let w = random_tensor(&[27, 3, 4], &mut rng).cast::<f32>();
    let mut worst = 0.0f64;
    let mut same_sites = true;
    for (kind, stride) in [(SparseConvKind::Submanifold, 1), (SparseConvKind::Strided, 2)] {
        let rb = Arc::new(build_rulebook(&coords, shape, kind));
        if kind == SparseConvKind::Submanifold {
            same_sites &= rb.out_coords == coords;
        }
        let y = crate::sparse_backbone::sparse_conv_forward(&x, &w, None, &rb);
        for (i, oc) in rb.out_coords.iter().enumerate() {
            let want = dense_conv3d(&coords, &x, &w, shape, oc, stride);
            for (o, v) in want.iter().enumerate() {
                worst = worst.max((y.data[i * 4 + o] as f64 - v).abs());
            }
        }
    }
    Check::new(
        "sparse conv vs dense",
        worst <= 1e-4 && same_sites,
        format!("max |diff| {worst:.2e}, submanifold sites preserved: {same_sites}"),
    )
}

/// `decode(build_targets(boxes))` recovers centers and headings.
pub fn round_trip_check(seed: u64, n: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = VoxelGridSpec::toy();
    let geom = BevGeometry::new(&spec, 8);
    let codec = RotBinCodec::default();
    let (mut dc, mut dt) = (0.0f64, 0.0f64);
    let mut found = 0;
    for _ in 0..n {
        let b = Box3D::new(
            rng.random_range(0.0..16.0),
            rng.random_range(-8.0..8.0),
            rng.random_range(-2.0..0.0),
            rng.random_range(3.0..5.0),
            rng.random_range(1.4..2.0),
            rng.random_range(1.3..1.8),
            rng.random_range(0.0..std::f64::consts::TAU),
            0,
        );
        let t = build_targets(&[b], 1, &geom, &codec);
        let maps = HeadMaps::from_targets(&t, geom, &codec);
        let peaks = extract_peaks(&maps.cls, 1, geom.rows, geom.cols, 1, 0.5);
        if let Some(d) = decode(&peaks, &maps, &codec, ScoreMode::Raw).first() {
            found += 1;
            dc = dc.max((d.bbox.x - b.x).abs().max((d.bbox.y - b.y).abs()).max((d.bbox.z - b.z).abs()));
            let e = (d.bbox.theta - b.theta).rem_euclid(std::f64::consts::TAU);
            dt = dt.max(e.min(std::f64::consts::TAU - e));
        }
    }
    Check::new(
        "target encode/decode round trip",
        found == n && dc <= 1e-5 && dt <= 1e-5,
        format!("{found}/{n} recovered, center err {dc:.1e} m, heading err {dt:.1e} rad"),
    )
}

fn peak_oracle(heat: &[f32], k: usize, rows: usize, cols: usize, top_k: usize, mu: f32) -> Vec<(usize, usize, usize)> {
    let at = |c: usize, u: i64, v: i64| -> Option<f32> {
        (u >= 0 && v >= 0 && (u as usize) < rows && (v as usize) < cols).then(|| heat[(c * rows + u as usize) * cols + v as usize])
    };
    let mut all = Vec::new();
    for c in 0..k {
        for u in 0..rows as i64 {
            for v in 0..cols as i64 {
                let h = at(c, u, v).unwrap();
                // plateaus keep their first cell in raster order
                let is_max = (-1..=1)
                    .flat_map(|du| (-1..=1).map(move |dv| (du, dv)))
                    .filter(|&d| d != (0, 0))
                    .all(|(du, dv)| {
                        at(c, u + du, v + dv).is_none_or(|o| o < h || (o == h && (du, dv) > (0, 0)))
                    });
                if is_max {
                    all.push((h, c, u as usize, v as usize));
                }
            }
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    all.into_iter()
        .take(top_k)
        .filter(|p| p.0 >= mu)
        .map(|p| (p.1, p.2, p.3))
        .collect()
}

/// Peak extraction against exhaustive search on random maps with plateaus.
pub fn peak_check(seed: u64, maps: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..maps {
        let (k, rows, cols) = (rng.random_range(1..3), rng.random_range(1..33), rng.random_range(1..33));
        let heat: Vec<f32> = (0..k * rows * cols).map(|_| (rng.random_range(0..8) as f32) / 8.0).collect();
        let top_k = rng.random_range(1..20);
        let mu = rng.random_range(0.0..0.8);
        let got: Vec<(usize, usize, usize)> = extract_peaks(&heat, k, rows, cols, top_k, mu)
            .iter()
            .map(|p: &Peak| (p.class_id, p.u, p.v))
            .collect();
        let want = peak_oracle(&heat, k, rows, cols, top_k, mu);
        let (mut g, mut w) = (got.clone(), want.clone());
        g.sort();
        w.sort();
        if g != w {
            bad += 1;
        }
    }
    Check::new("peak extraction vs exhaustive", bad == 0, format!("{bad}/{maps} maps differ"))
}

pub fn conf_mapping_check() -> Check {
    let got: Vec<f64> = [0.25, 0.5, 0.6, 0.75].iter().map(|&i| iou_to_conf(i)).collect();
    let want = [0.0, 0.5, 0.7, 1.0];
    let ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-12);
    Check::new("IoU to confidence mapping", ok, format!("{got:?}"))
}

/// Three frames, one object each: TP at 0.9, FP at 0.8, TP at 0.7.
pub fn ap_golden_check() -> Check {
    let gt = |x: f64| Box3D::new(x, 0.0, 0.0, 4.0, 1.8, 1.5, 0.0, 0);
    let det = |b: Box3D, s: f32| Detection {
        bbox: b,
        class_id: 0,
        cls_score: s,
        iou_conf: s,
        final_score: s,
        pixel: (0, 0),
        clamped: false,
    };
    let gts = vec![vec![gt(0.0)], vec![gt(10.0)], vec![gt(20.0)]];
    let dets = vec![vec![det(gt(0.0), 0.9)], vec![det(gt(40.0), 0.8)], vec![det(gt(20.0), 0.7)]];
    let c = evaluate_ap(&dets, &gts, 0.7, Metric::ThreeD);
    let ok = (c.ap - 13.0 / 24.0).abs() < 1e-12 && c.recall.len() == 40;
    Check::new("AP golden fixture", ok, format!("AP {:.6}, want {:.6}", c.ap, 13.0 / 24.0))
}

/// Every check; `full` adds the micro-model gradient check.
pub fn run_all(full: bool) -> Vec<Check> {
    let mut out = op_gradchecks(1);
    if full {
        out.push(grad_check("micro model end to end", micro_model_gradcheck(2), MODEL_TOL));
    }
    out.extend(iou_checks(3, 200));
    out.push(sparse_conv_check(4));
    out.push(round_trip_check(5, 100));
    out.push(peak_check(6, 100));
    out.push(conf_mapping_check());
    out.push(ap_golden_check());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        for c in run_all(false) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn micro_model_passes() {
        let r = micro_model_gradcheck(11);
        assert!(r.checked > 100);
        assert!(r.max_rel_err <= MODEL_TOL, "{r:?}");
    }
}
