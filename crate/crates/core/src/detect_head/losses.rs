// SPDX-License-Identifier: Apache-2.0

//! Head losses. Every map argument is a `(B, C, L, W)` tape value; the
//! supervised pixels are passed explicitly with their batch index.

use super::corners::{corner_signs, corners_of, corners_raw};
use super::RotBinCodec;
use crate::autodiff::{Tape, Var};
use crate::data_ingest::Box3D;
use crate::iou_conf::PROB_EPS;
use crate::ops;
use crate::real::{sigmoid, Real};
use crate::tensor::Tensor;
use crate::voxel_grid::BevGeometry;

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;

/// Supervised pixel: batch index and position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pix {
    pub b: usize,
    pub u: usize,
    pub v: usize,
}

fn idx(shape: &[usize], b: usize, c: usize, u: usize, v: usize) -> usize {
    ((b * shape[1] + c) * shape[2] + u) * shape[3] + v
}

fn norm<T: Real>(n: usize) -> T {
    T::lit(n.max(1) as f64)
}

/// Penalty-reduced focal loss on heatmap logits. `heat` holds the targets
/// in the same layout; cells equal to 1 are positives.
pub fn cls_focal_loss<T: Real>(tape: &mut Tape<T>, logits: Var, heat: &[f64], n: usize) -> Var {
    let x = tape.value(logits);
    assert_eq!(x.len(), heat.len(), "focal loss: target size mismatch");
    let eps = T::lit(PROB_EPS);
    let one = T::one();
    let mut total = T::zero();
    for (z, &t) in x.data.iter().zip(heat) {
        let p = sigmoid(*z).max(eps).min(one - eps);
        total -= if t == 1.0 {
            (one - p).powi(FOCAL_ALPHA) * p.ln()
        } else {
            T::lit((1.0 - t).powi(FOCAL_BETA)) * p.powi(FOCAL_ALPHA) * (one - p).ln()
        };
    }
    let value = total / norm::<T>(n);
    let heat = heat.to_vec();
    tape.push("cls_focal_loss", Tensor::scalar(value), &[logits], move |ctx| {
        let x = ctx.input(0);
        let scale = ctx.grad.item() / norm::<T>(n);
        let a = T::lit(FOCAL_ALPHA as f64);
        let data = x
            .data
            .iter()
            .zip(&heat)
            .map(|(z, &t)| {
                let s = sigmoid(*z);
                if !(s > eps && s < one - eps) {
                    return T::zero();
                }
                let dfdp = if t == 1.0 {
                    a * (one - s).powi(FOCAL_ALPHA - 1) * s.ln() - (one - s).powi(FOCAL_ALPHA) / s
                } else {
                    let w = T::lit((1.0 - t).powi(FOCAL_BETA));
                    -w * (a * s.powi(FOCAL_ALPHA - 1) * (one - s).ln() - s.powi(FOCAL_ALPHA) / (one - s))
                };
                dfdp * s * (one - s) * scale
            })
            .collect();
        vec![Some(Tensor::from_vec(&x.shape, data))]
    })
}

/// Sum of absolute errors over all channels at the supervised pixels,
/// divided by `max(n, 1)`.
pub fn center_l1_loss<T: Real>(tape: &mut Tape<T>, pred: Var, entries: &[(Pix, Vec<f64>)], n: usize) -> Var {
    let x = tape.value(pred);
    let shape = x.shape.clone();
    let mut total = T::zero();
    for (p, t) in entries {
        assert_eq!(t.len(), shape[1], "l1 loss: channel mismatch");
        for (c, tv) in t.iter().enumerate() {
            total += (x.data[idx(&shape, p.b, c, p.u, p.v)] - T::lit(*tv)).abs();
        }
    }
    let entries = entries.to_vec();
    tape.push("center_l1_loss", Tensor::scalar(total / norm::<T>(n)), &[pred], move |ctx| {
        let x = ctx.input(0);
        let scale = ctx.grad.item() / norm::<T>(n);
        let mut g = Tensor::zeros(&x.shape);
        for (p, t) in &entries {
            for (c, tv) in t.iter().enumerate() {
                let i = idx(&shape, p.b, c, p.u, p.v);
                let d = x.data[i] - T::lit(*tv);
                if d != T::zero() {
                    g.data[i] += d.signum() * scale;
                }
            }
        }
        vec![Some(g)]
    })
}

/// Bin cross-entropy plus L1 on the residual of the ground-truth bin.
pub fn rot_loss<T: Real>(
    tape: &mut Tape<T>,
    bin_logits: Var,
    res: Var,
    entries: &[(Pix, usize, f64)],
    n: usize,
) -> Var {
    let (xl, xr) = (tape.value(bin_logits), tape.value(res));
    let shape = xl.shape.clone();
    assert_eq!(xr.shape, shape, "rot loss: bin and residual maps differ");
    let bins = shape[1];
    let mut total = T::zero();
    for (p, bin, r) in entries {
        let logits: Vec<T> = (0..bins).map(|c| xl.data[idx(&shape, p.b, c, p.u, p.v)]).collect();
        let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
        total += lse - logits[*bin];
        total += (xr.data[idx(&shape, p.b, *bin, p.u, p.v)] - T::lit(*r)).abs();
    }
    let entries = entries.to_vec();
    tape.push("rot_loss", Tensor::scalar(total / norm::<T>(n)), &[bin_logits, res], move |ctx| {
        let (xl, xr) = (ctx.input(0), ctx.input(1));
        let scale = ctx.grad.item() / norm::<T>(n);
        let mut gl = Tensor::zeros(&xl.shape);
        let mut gr = Tensor::zeros(&xr.shape);
        for (p, bin, r) in &entries {
            let logits: Vec<T> = (0..bins).map(|c| xl.data[idx(&shape, p.b, c, p.u, p.v)]).collect();
            let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
            let s: T = e.iter().copied().sum();
            for c in 0..bins {
                let onehot = if c == *bin { T::one() } else { T::zero() };
                gl.data[idx(&shape, p.b, c, p.u, p.v)] += (e[c] / s - onehot) * scale;
            }
            let i = idx(&shape, p.b, *bin, p.u, p.v);
            let d = xr.data[i] - T::lit(*r);
            if d != T::zero() {
                gr.data[i] += d.signum() * scale;
            }
        }
        vec![Some(gl), Some(gr)]
    })
}

/// Head maps feeding the box decoder inside the corner loss.
#[derive(Clone, Copy, Debug)]
pub struct BoxMaps {
    pub offset: Var,
    pub z: Var,
    pub size: Var,
    pub rot_bin: Var,
    pub rot_res: Var,
}

/// Box decoded from raw head values at one pixel. The bin is the argmax of
/// the logits; the result is not normalised so gradients stay smooth.
#[allow(clippy::too_many_arguments)]
fn raw_box(geom: &BevGeometry, codec: &RotBinCodec, p: Pix, off: [f64; 2], z: f64, size: [f64; 3], bin: usize, res: f64) -> [f64; 7] {
    let w = codec.width();
    [
        (p.u as f64 + off[0]) * geom.cell[0] + geom.origin[0],
        (p.v as f64 + off[1]) * geom.cell[1] + geom.origin[1],
        z,
        size[0],
        size[1],
        size[2],
        (bin as f64 + 0.5) * w + res * w / 2.0,
    ]
}

fn argmax<T: Real>(vals: impl Iterator<Item = T>) -> usize {
    let mut best = (0, T::neg_infinity());
    for (i, v) in vals.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Sum over the eight canonical corners of the Euclidean distance between
/// the decoded prediction and the ground truth, averaged over `max(n, 1)`.
/// The bin choice is treated as a constant.
pub fn corner_loss<T: Real>(
    tape: &mut Tape<T>,
    maps: BoxMaps,
    entries: &[(Pix, Box3D)],
    geom: &BevGeometry,
    codec: &RotBinCodec,
    n: usize,
) -> Var {
    let shape = tape.value(maps.offset).shape.clone();
    let bins = tape.value(maps.rot_bin).dim(1);
    let chosen: Vec<usize> = entries
        .iter()
        .map(|(p, _)| {
            let l = tape.value(maps.rot_bin);
            argmax((0..bins).map(|c| l.data[idx(&l.shape, p.b, c, p.u, p.v)]))
        })
        .collect();
    let read = |tape: &Tape<T>, v: Var, c: usize, p: &Pix| -> f64 {
        let t = tape.value(v);
        t.data[idx(&t.shape, p.b, c, p.u, p.v)].f64()
    };
    let mut preds = Vec::with_capacity(entries.len());
    for ((p, _), &bin) in entries.iter().zip(&chosen) {
        preds.push(raw_box(
            geom,
            codec,
            *p,
            [read(tape, maps.offset, 0, p), read(tape, maps.offset, 1, p)],
            read(tape, maps.z, 0, p),
            [read(tape, maps.size, 0, p), read(tape, maps.size, 1, p), read(tape, maps.size, 2, p)],
            bin,
            read(tape, maps.rot_res, bin, p),
        ));
    }
    let nn = n.max(1) as f64;
    let mut total = 0.0;
    // d loss / d (x, y, z, l, w, h, theta) per entry
    let mut dbox = Vec::with_capacity(entries.len());
    for (pb, (_, gt)) in preds.iter().zip(entries) {
        let pc = corners_raw(pb[0], pb[1], pb[2], pb[3], pb[4], pb[5], pb[6]);
        let gc = corners_of(gt);
        let (s, c) = pb[6].sin_cos();
        let mut d = [0.0; 7];
        for k in 0..8 {
            let diff = [pc[k][0] - gc[k][0], pc[k][1] - gc[k][1], pc[k][2] - gc[k][2]];
            let dist = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
            total += dist;
            if dist == 0.0 {
                continue;
            }
            let u = diff.map(|e| e / dist);
            let sg = corner_signs(k);
            let (a, b) = (sg[0] * pb[3] / 2.0, sg[1] * pb[4] / 2.0);
            d[0] += u[0];
            d[1] += u[1];
            d[2] += u[2];
            // corner_xy = center + R(theta) (a, b)
            d[3] += u[0] * c * sg[0] / 2.0 + u[1] * s * sg[0] / 2.0;
            d[4] += -u[0] * s * sg[1] / 2.0 + u[1] * c * sg[1] / 2.0;
            d[5] += u[2] * sg[2] / 2.0;
            d[6] += u[0] * (-s * a - c * b) + u[1] * (c * a - s * b);
        }
        dbox.push(d);
    }
    let value = T::lit(total / nn);
    let (cell, half_bin) = (geom.cell, codec.width() / 2.0);
    let parents = [maps.offset, maps.z, maps.size, maps.rot_res];
    let pix: Vec<Pix> = entries.iter().map(|e| e.0).collect();
    tape.push("corner_loss", Tensor::scalar(value), &parents, move |ctx| {
        let scale = ctx.grad.item().f64() / nn;
        let mut go = Tensor::zeros(&ctx.input(0).shape);
        let mut gz = Tensor::zeros(&ctx.input(1).shape);
        let mut gs = Tensor::zeros(&ctx.input(2).shape);
        let mut gr = Tensor::zeros(&ctx.input(3).shape);
        for ((p, d), &bin) in pix.iter().zip(&dbox).zip(&chosen) {
            let at = |t: &Tensor<T>, c: usize| idx(&t.shape, p.b, c, p.u, p.v);
            let i0 = at(&go, 0);
            let i1 = at(&go, 1);
            go.data[i0] += T::lit(d[0] * cell[0] * scale);
            go.data[i1] += T::lit(d[1] * cell[1] * scale);
            let iz = at(&gz, 0);
            gz.data[iz] += T::lit(d[2] * scale);
            for c in 0..3 {
                let i = at(&gs, c);
                gs.data[i] += T::lit(d[3 + c] * scale);
            }
            let ir = at(&gr, bin);
            gr.data[ir] += T::lit(d[6] * half_bin * scale);
        }
        let _ = &shape;
        vec![Some(go), Some(gz), Some(gs), Some(gr)]
    })
}

/// `gamma . (offset, z, size, rot, corner)`.
pub fn box_loss<T: Real>(tape: &mut Tape<T>, parts: [Var; 5], gammas: [f64; 5]) -> Var {
    ops::weighted_total(tape, &parts, &gammas)
}
