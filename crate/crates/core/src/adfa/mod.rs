// SPDX-License-Identifier: Apache-2.0

//! Height-flattening of the sparse backbone output into a BEV map, the
//! deformable tower and the supervised attention gate.

mod deform;
mod tower;

pub use deform::{deform_conv, deform_conv_forward, DeformConvLayer, DEFORM_TAPS};
pub use tower::{AttentionHead, DeformTower, Level, TowerConfig, LEVEL_STRIDES};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data_ingest::Box3D;
use crate::iou_conf::PROB_EPS;
use crate::nn::Fwd;
use crate::params::ParamStore;
use crate::real::{sigmoid, Real};
use crate::sparse_backbone::SparseVar;
use crate::tensor::Tensor;
use crate::voxel_grid::{BevGeometry, SparseVolume, VoxelCoord};

pub const MASK_ALPHA: f64 = 0.25;
pub const MASK_GAMMA: i32 = 2;

fn flat_index(c: &VoxelCoord, ch: usize, c1: usize, shape: [usize; 3]) -> usize {
    let channels = c1 * shape[2];
    let plane = ch + c.z as usize * c1;
    ((c.b as usize * channels + plane) * shape[0] + c.x as usize) * shape[1] + c.y as usize
}

/// Scatter `(N, C1)` voxel features into a `(B, C1 * H, L, W)` map with
/// channel `h * C1 + c1`.
pub fn flatten_height_dense<T: Real>(coords: &[VoxelCoord], feats: &Tensor<T>, shape: [usize; 3], batch: usize) -> Tensor<T> {
    let c1 = feats.dim(1);
    let mut out = Tensor::zeros(&[batch, c1 * shape[2], shape[0], shape[1]]);
    for (i, c) in coords.iter().enumerate() {
        for ch in 0..c1 {
            out.data[flat_index(c, ch, c1, shape)] = feats.data[i * c1 + ch];
        }
    }
    out
}

/// Inverse of [`flatten_height_dense`] on the given active sites.
pub fn unflatten_height<T: Real>(map: &Tensor<T>, coords: &[VoxelCoord], c1: usize, shape: [usize; 3]) -> Tensor<T> {
    let mut out = Tensor::zeros(&[coords.len(), c1]);
    for (i, c) in coords.iter().enumerate() {
        for ch in 0..c1 {
            out.data[i * c1 + ch] = map.data[flat_index(c, ch, c1, shape)];
        }
    }
    out
}

pub fn flatten_height_volume<T: Real>(vol: &SparseVolume<T>) -> Tensor<T> {
    flatten_height_dense(&vol.coords, &vol.feats, vol.spatial_shape, vol.batch_size)
}

/// Recorded height flattening.
pub fn flatten_height<T: Real>(tape: &mut Tape<T>, x: &SparseVar) -> Var {
    let out = flatten_height_dense(&x.coords, tape.value(x.feats), x.spatial_shape, x.batch_size);
    let coords = x.coords.clone();
    let shape = x.spatial_shape;
    tape.push("flatten_height", out, &[x.feats], move |ctx| {
        let c1 = ctx.input(0).dim(1);
        vec![Some(unflatten_height(ctx.grad, &coords, c1, shape))]
    })
}

/// `G = (1 + sigmoid(logits)) * F`, the single logit channel broadcast over
/// the channels of `F`.
pub fn attention_gate<T: Real>(tape: &mut Tape<T>, f: Var, logits: Var) -> Var {
    let (fv, lv) = (tape.value(f), tape.value(logits));
    let (b, c, h, w) = (fv.dim(0), fv.dim(1), fv.dim(2), fv.dim(3));
    assert_eq!(lv.shape, [b, 1, h, w], "attention_gate: logit shape");
    let hw = h * w;
    let mut out = fv.clone();
    for bi in 0..b {
        for ch in 0..c {
            for p in 0..hw {
                out.data[(bi * c + ch) * hw + p] *= T::one() + sigmoid(lv.data[bi * hw + p]);
            }
        }
    }
    tape.push("attention_gate", out, &[f, logits], move |ctx| {
        let (fv, lv, g) = (ctx.input(0), ctx.input(1), ctx.grad);
        let mut gf = Tensor::zeros(&fv.shape);
        let mut gl = Tensor::zeros(&lv.shape);
        for bi in 0..b {
            for p in 0..hw {
                let s = sigmoid(lv.data[bi * hw + p]);
                let mut acc = T::zero();
                for ch in 0..c {
                    let i = (bi * c + ch) * hw + p;
                    gf.data[i] = g.data[i] * (T::one() + s);
                    acc += g.data[i] * fv.data[i];
                }
                gl.data[bi * hw + p] = acc * s * (T::one() - s);
            }
        }
        vec![Some(gf), Some(gl)]
    })
}

/// Class-agnostic BEV foreground mask `(L, W)`: 1 where the cell center
/// lies inside a ground-truth footprint, taken half-open along each box
/// axis.
pub fn mask_target(gt: &[Box3D], geom: &BevGeometry) -> Vec<f64> {
    let mut m = vec![0.0; geom.rows * geom.cols];
    for u in 0..geom.rows {
        for v in 0..geom.cols {
            let c = geom.cell_center(u, v);
            let inside = gt.iter().any(|b| {
                let (s, co) = b.theta.sin_cos();
                let (dx, dy) = (c[0] - b.x, c[1] - b.y);
                let (lx, ly) = (co * dx + s * dy, -s * dx + co * dy);
                (-b.l / 2.0..b.l / 2.0).contains(&lx) && (-b.w / 2.0..b.w / 2.0).contains(&ly)
            });
            if inside {
                m[u * geom.cols + v] = 1.0;
            }
        }
    }
    m
}

/// Binary focal loss of the attention logits `(B, 1, L, W)` against the
/// concatenated per-scene masks, averaged over all cells.
pub fn mask_focal_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: &[f64]) -> Var {
    let x = tape.value(logits);
    assert_eq!(x.len(), target.len(), "mask loss: target size mismatch");
    let (eps, one) = (T::lit(PROB_EPS), T::one());
    let a = T::lit(MASK_ALPHA);
    let cells = target.len().max(1);
    let mut total = T::zero();
    for (z, &t) in x.data.iter().zip(target) {
        let p = sigmoid(*z).max(eps).min(one - eps);
        total -= if t == 1.0 {
            a * (one - p).powi(MASK_GAMMA) * p.ln()
        } else {
            (one - a) * p.powi(MASK_GAMMA) * (one - p).ln()
        };
    }
    let value = total / T::lit(cells as f64);
    let target = target.to_vec();
    tape.push("mask_focal_loss", Tensor::scalar(value), &[logits], move |ctx| {
        let x = ctx.input(0);
        let scale = ctx.grad.item() / T::lit(cells as f64);
        let g = T::lit(MASK_GAMMA as f64);
        let data = x
            .data
            .iter()
            .zip(&target)
            .map(|(z, &t)| {
                let s = sigmoid(*z);
                if !(s > eps && s < one - eps) {
                    return T::zero();
                }
                let dfdp = if t == 1.0 {
                    a * (g * (one - s).powi(MASK_GAMMA - 1) * s.ln() - (one - s).powi(MASK_GAMMA) / s)
                } else {
                    -(one - a) * (g * s.powi(MASK_GAMMA - 1) * (one - s).ln() - s.powi(MASK_GAMMA) / (one - s))
                };
                dfdp * s * (one - s) * scale
            })
            .collect();
        vec![Some(Tensor::from_vec(&x.shape, data))]
    })
}

/// Tower plus attention.
#[derive(Clone, Debug)]
pub struct Adfa {
    pub tower: DeformTower,
    pub attention: AttentionHead,
}

#[derive(Clone, Copy, Debug)]
pub struct AdfaOut {
    /// Tower output `F`.
    pub f: Var,
    /// Attention logits, `(B, 1, L, W)`.
    pub s_logits: Var,
    /// Gated map `G`.
    pub g: Var,
}

impl Adfa {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: TowerConfig, att_hidden: usize) -> Self {
        let tower = DeformTower::new(store, rng, cfg);
        let attention = AttentionHead::new(store, rng, cfg.out_ch, att_hidden);
        Self { tower, attention }
    }

    pub fn forward<T: Real>(&self, fw: &mut Fwd<'_, T>, x: Var) -> AdfaOut {
        let f = self.tower.forward(fw, x);
        let s_logits = self.attention.forward(fw, f);
        let g = attention_gate(&mut fw.tape, f, s_logits);
        AdfaOut { f, s_logits, g }
    }
}

/// Fraction of cells whose channel L2 norm exceeds `rel * max` over the
/// map `(C, L, W)` of batch element `b`.
pub fn activated_fraction<T: Real>(map: &Tensor<T>, b: usize, rel: f64) -> f64 {
    let (c, h, w) = (map.dim(1), map.dim(2), map.dim(3));
    let hw = h * w;
    let norms: Vec<f64> = (0..hw)
        .map(|p| {
            (0..c)
                .map(|ch| map.data[(b * c + ch) * hw + p].f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0.0;
    }
    norms.iter().filter(|&&n| n > rel * max).count() as f64 / hw as f64
}
