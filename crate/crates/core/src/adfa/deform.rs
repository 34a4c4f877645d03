// SPDX-License-Identifier: Apache-2.0

//! Modulated deformable 3x3 convolution (stride 1, zero padding 1).
//!
//! Offsets are `(B, 18, H, W)` with channel `2k` the row shift and `2k + 1`
//! the column shift of tap `k = 3 * ky + kx`; modulations are
//! `(B, 9, H, W)`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::linalg::gemm;
use crate::nn::{BatchNorm, Conv, Fwd};
use crate::ops::{self, Conv2dSpec};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFORM_TAPS: usize = 9;

/// Bilinear sample with zero padding and its partial derivatives with
/// respect to the row and column coordinates.
fn bilinear<T: Real>(plane: &[T], h: usize, w: usize, py: T, px: T) -> (T, T, T) {
    let (y0, x0) = (py.floor(), px.floor());
    let (ly, lx) = (py - y0, px - x0);
    let (y0, x0) = (y0.f64() as i64, x0.f64() as i64);
    let at = |y: i64, x: i64| -> T {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            T::zero()
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let (v00, v01, v10, v11) = (at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1));
    let one = T::one();
    let val = (one - ly) * ((one - lx) * v00 + lx * v01) + ly * ((one - lx) * v10 + lx * v11);
    let dy = (one - lx) * (v10 - v00) + lx * (v11 - v01);
    let dx = (one - ly) * (v01 - v00) + ly * (v11 - v10);
    (val, dy, dx)
}

/// Add `g` into the four bilinear neighbours of `(py, px)`.
fn bilinear_scatter<T: Real>(plane: &mut [T], h: usize, w: usize, py: T, px: T, g: T) {
    let (y0, x0) = (py.floor(), px.floor());
    let (ly, lx) = (py - y0, px - x0);
    let (y0, x0) = (y0.f64() as i64, x0.f64() as i64);
    let one = T::one();
    for (dy, dx, wt) in [
        (0, 0, (one - ly) * (one - lx)),
        (0, 1, (one - ly) * lx),
        (1, 0, ly * (one - lx)),
        (1, 1, ly * lx),
    ] {
        let (y, x) = (y0 + dy, x0 + dx);
        if y >= 0 && x >= 0 && y < h as i64 && x < w as i64 {
            plane[y as usize * w + x as usize] += wt * g;
        }
    }
}

struct Dims {
    ci: usize,
    h: usize,
    w: usize,
}

impl Dims {
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Sampling position of tap `k` for output pixel `p`.
fn position<T: Real>(off: &[T], d: &Dims, k: usize, p: usize) -> (T, T) {
    let hw = d.hw();
    let (oy, ox) = (p / d.w, p % d.w);
    let (ky, kx) = (k / 3, k % 3);
    let py = T::lit(oy as f64 + ky as f64 - 1.0) + off[2 * k * hw + p];
    let px = T::lit(ox as f64 + kx as f64 - 1.0) + off[(2 * k + 1) * hw + p];
    (py, px)
}

/// Unmodulated samples `(Ci * 9, H * W)` of one batch element.
fn sample_cols<T: Real>(x: &[T], off: &[T], d: &Dims) -> Vec<T> {
    let hw = d.hw();
    let mut col = vec![T::zero(); d.ci * DEFORM_TAPS * hw];
    for k in 0..DEFORM_TAPS {
        for p in 0..hw {
            let (py, px) = position(off, d, k, p);
            for c in 0..d.ci {
                col[(c * DEFORM_TAPS + k) * hw + p] = bilinear(&x[c * hw..(c + 1) * hw], d.h, d.w, py, px).0;
            }
        }
    }
    col
}

fn check_shapes<T: Real>(x: &Tensor<T>, off: &Tensor<T>, m: &Tensor<T>, w: &Tensor<T>) -> (usize, usize, Dims) {
    assert_eq!(x.shape.len(), 4, "deform_conv: input must be (B, C, H, W)");
    let (b, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    assert_eq!(off.shape, [b, 2 * DEFORM_TAPS, h, wd], "deform_conv: offset shape");
    assert_eq!(m.shape, [b, DEFORM_TAPS, h, wd], "deform_conv: modulation shape");
    assert_eq!(&w.shape[1..], [ci, 3, 3], "deform_conv: weight shape");
    (b, w.dim(0), Dims { ci, h, w: wd })
}

pub fn deform_conv_forward<T: Real>(
    x: &Tensor<T>,
    off: &Tensor<T>,
    m: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let (b, co, d) = check_shapes(x, off, m, w);
    let hw = d.hw();
    let ck = d.ci * DEFORM_TAPS;
    let mut out = Tensor::zeros(&[b, co, d.h, d.w]);
    for bi in 0..b {
        let xb = &x.data[bi * d.ci * hw..(bi + 1) * d.ci * hw];
        let ob_off = &off.data[bi * 2 * DEFORM_TAPS * hw..(bi + 1) * 2 * DEFORM_TAPS * hw];
        let mb = &m.data[bi * DEFORM_TAPS * hw..(bi + 1) * DEFORM_TAPS * hw];
        let mut col = sample_cols(xb, ob_off, &d);
        for (r, row) in col.chunks_mut(hw).enumerate() {
            let k = r % DEFORM_TAPS;
            row.iter_mut().zip(&mb[k * hw..(k + 1) * hw]).for_each(|(v, s)| *v *= *s);
        }
        let ob = &mut out.data[bi * co * hw..(bi + 1) * co * hw];
        if let Some(bias) = bias {
            for (c, chunk) in ob.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias.data[c]);
            }
        }
        gemm(co, ck, hw, &w.data, false, &col, false, T::one(), ob);
    }
    out
}

/// Recorded deformable convolution; differentiable in all of `x`,
/// `offset`, `modulation`, `w` and `bias`.
pub fn deform_conv<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    offset: Var,
    modulation: Var,
    w: Var,
    bias: Option<Var>,
) -> Var {
    let out = deform_conv_forward(
        tape.value(x),
        tape.value(offset),
        tape.value(modulation),
        tape.value(w),
        bias.map(|b| tape.value(b)),
    );
    let mut parents = vec![x, offset, modulation, w];
    parents.extend(bias);
    tape.push("deform_conv", out, &parents, |ctx| {
        let (x, off, m, w) = (ctx.input(0), ctx.input(1), ctx.input(2), ctx.input(3));
        let (b, co, d) = check_shapes(x, off, m, w);
        let hw = d.hw();
        let ck = d.ci * DEFORM_TAPS;
        let mut gx = Tensor::zeros(&x.shape);
        let mut goff = Tensor::zeros(&off.shape);
        let mut gm = Tensor::zeros(&m.shape);
        let mut gw = Tensor::zeros(&w.shape);
        let mut gcol = vec![T::zero(); ck * hw];
        for bi in 0..b {
            let xb = &x.data[bi * d.ci * hw..(bi + 1) * d.ci * hw];
            let offb = &off.data[bi * 2 * DEFORM_TAPS * hw..(bi + 1) * 2 * DEFORM_TAPS * hw];
            let mb = &m.data[bi * DEFORM_TAPS * hw..(bi + 1) * DEFORM_TAPS * hw];
            let gout = &ctx.grad.data[bi * co * hw..(bi + 1) * co * hw];
            let samp = sample_cols(xb, offb, &d);
            let mut col = samp.clone();
            for (r, row) in col.chunks_mut(hw).enumerate() {
                let k = r % DEFORM_TAPS;
                row.iter_mut().zip(&mb[k * hw..(k + 1) * hw]).for_each(|(v, s)| *v *= *s);
            }
            gemm(co, hw, ck, gout, false, &col, true, T::one(), &mut gw.data);
            gemm(ck, co, hw, &w.data, true, gout, false, T::zero(), &mut gcol);

            let gxb = &mut gx.data[bi * d.ci * hw..(bi + 1) * d.ci * hw];
            let goffb = &mut goff.data[bi * 2 * DEFORM_TAPS * hw..(bi + 1) * 2 * DEFORM_TAPS * hw];
            let gmb = &mut gm.data[bi * DEFORM_TAPS * hw..(bi + 1) * DEFORM_TAPS * hw];
            for k in 0..DEFORM_TAPS {
                for p in 0..hw {
                    let (py, px) = position(offb, &d, k, p);
                    let mk = mb[k * hw + p];
                    let (mut gy, mut gxx, mut gmod) = (T::zero(), T::zero(), T::zero());
                    for c in 0..d.ci {
                        let r = (c * DEFORM_TAPS + k) * hw + p;
                        let g = gcol[r];
                        if g == T::zero() {
                            continue;
                        }
                        gmod += g * samp[r];
                        let plane = &xb[c * hw..(c + 1) * hw];
                        let (_, dy, dx) = bilinear(plane, d.h, d.w, py, px);
                        gy += g * mk * dy;
                        gxx += g * mk * dx;
                        bilinear_scatter(&mut gxb[c * hw..(c + 1) * hw], d.h, d.w, py, px, g * mk);
                    }
                    gmb[k * hw + p] += gmod;
                    goffb[2 * k * hw + p] += gy;
                    goffb[(2 * k + 1) * hw + p] += gxx;
                }
            }
        }
        let mut grads = vec![Some(gx), Some(goff), Some(gm), Some(gw)];
        if ctx.parents_len() == 5 {
            let mut gb = Tensor::zeros(&[co]);
            for bi in 0..b {
                for c in 0..co {
                    let s: T = ctx.grad.data[(bi * co + c) * hw..(bi * co + c + 1) * hw].iter().copied().sum();
                    gb.data[c] += s;
                }
            }
            grads.push(Some(gb));
        }
        grads
    })
}

/// Deformable convolution with its offset and modulation branches, followed
/// by batch norm and ReLU. Both branches start at zero weights, so the
/// initial sampling grid is regular and the modulation is 0.5 everywhere.
#[derive(Clone, Debug)]
pub struct DeformConvLayer {
    pub w: ParamId,
    pub offset: Conv,
    pub modulation: Conv,
    pub bn: BatchNorm,
}

impl DeformConvLayer {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, prefix: &str, ci: usize, co: usize) -> Self {
        let w = store.add_kaiming(format!("{prefix}.w"), &[co, ci, 3, 3], ci * 9, rng);
        let offset = Conv::new(store, rng, &format!("{prefix}.offset"), ci, 2 * DEFORM_TAPS, 3, Conv2dSpec::SAME3, true);
        let modulation = Conv::new(store, rng, &format!("{prefix}.modulation"), ci, DEFORM_TAPS, 3, Conv2dSpec::SAME3, true);
        for id in [offset.w, modulation.w] {
            store.get_mut(id).value.data.iter_mut().for_each(|v| *v = T::zero());
        }
        Self {
            w,
            offset,
            modulation,
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), co),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Var {
        let off = self.offset.forward(f, x);
        let m = self.modulation.forward(f, x);
        let m = ops::sigmoid(&mut f.tape, m);
        let w = f.param(self.w);
        let y = deform_conv(&mut f.tape, x, off, m, w, None);
        let y = self.bn.forward(f, y);
        ops::relu(&mut f.tape, y)
    }
}
