// SPDX-License-Identifier: Apache-2.0

//! Dense 2D convolution (im2col + GEMM) and the non-overlapping transposed
//! convolution used for upsampling in the BEV tower.

use crate::autodiff::{Tape, Var};
use crate::linalg::gemm;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub const SAME3: Conv2dSpec = Conv2dSpec { stride: 1, pad: 1 };
    pub const DOWN3: Conv2dSpec = Conv2dSpec { stride: 2, pad: 1 };
    pub const POINTWISE: Conv2dSpec = Conv2dSpec { stride: 1, pad: 0 };

    pub fn out_size(&self, n: usize, k: usize) -> usize {
        (n + 2 * self.pad - k) / self.stride + 1
    }
}

struct Geom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    s: usize,
    p: usize,
}

fn im2col<T: Real>(x: &[T], g: &Geom, col: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geom, x: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let srcp = &col[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += srcp[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Real>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> (usize, usize, Geom) {
    assert_eq!(x.shape.len(), 4, "conv2d: input must be (B, C, H, W)");
    assert_eq!(w.shape.len(), 4, "conv2d: weight must be (Co, Ci, k, k)");
    assert_eq!(x.dim(1), w.dim(1), "conv2d: channel mismatch");
    let k = w.dim(2);
    let (h, wd) = (x.dim(2), x.dim(3));
    let g = Geom {
        ci: x.dim(1),
        h,
        w: wd,
        k,
        ho: spec.out_size(h, k),
        wo: spec.out_size(wd, k),
        s: spec.stride,
        p: spec.pad,
    };
    (x.dim(0), w.dim(0), g)
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Tensor<T> {
    let (b, co, g) = geometry(x, w, spec);
    let ck = g.ci * g.k * g.k;
    let hwo = g.ho * g.wo;
    let in_plane = g.ci * g.h * g.w;
    let mut out = Tensor::zeros(&[b, co, g.ho, g.wo]);
    let mut col = vec![T::zero(); ck * hwo];
    for bi in 0..b {
        let xb = &x.data[bi * in_plane..(bi + 1) * in_plane];
        im2col(xb, &g, &mut col);
        let ob = &mut out.data[bi * co * hwo..(bi + 1) * co * hwo];
        if let Some(bias) = bias {
            for (c, chunk) in ob.chunks_mut(hwo).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias.data[c]);
            }
        }
        gemm(co, ck, hwo, &w.data, false, &col, false, T::one(), ob);
    }
    out
}

/// `(B, Ci, H, W) * (Co, Ci, k, k) + (Co,)`.
pub fn conv2d<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Var {
    let out = conv2d_forward(tape.value(x), tape.value(w), bias.map(|b| tape.value(b)), spec);
    let has_bias = bias.is_some();
    let mut parents = vec![x, w];
    parents.extend(bias);
    tape.push("conv2d", out, &parents, move |ctx| {
        let (x, w, gout) = (ctx.input(0), ctx.input(1), ctx.grad);
        let (b, co, g) = geometry(x, w, spec);
        let ck = g.ci * g.k * g.k;
        let hwo = g.ho * g.wo;
        let in_plane = g.ci * g.h * g.w;
        let mut gx = ctx.needs(0).then(|| Tensor::zeros(&x.shape));
        let mut gw = Tensor::zeros(&w.shape);
        let mut col = vec![T::zero(); ck * hwo];
        let mut gcol = vec![T::zero(); ck * hwo];
        for bi in 0..b {
            let gb = &gout.data[bi * co * hwo..(bi + 1) * co * hwo];
            if ctx.needs(1) {
                im2col(&x.data[bi * in_plane..(bi + 1) * in_plane], &g, &mut col);
                gemm(co, hwo, ck, gb, false, &col, true, T::one(), &mut gw.data);
            }
            if let Some(gx) = gx.as_mut() {
                gemm(ck, co, hwo, &w.data, true, gb, false, T::zero(), &mut gcol);
                col2im(&gcol, &g, &mut gx.data[bi * in_plane..(bi + 1) * in_plane]);
            }
        }
        let mut grads = vec![gx, ctx.needs(1).then_some(gw)];
        if has_bias {
            let mut gbias = vec![T::zero(); co];
            for bi in 0..b {
                for (c, gb) in gbias.iter_mut().enumerate() {
                    let off = (bi * co + c) * hwo;
                    *gb += gout.data[off..off + hwo].iter().copied().sum::<T>();
                }
            }
            grads.push(Some(Tensor::from_vec(&[co], gbias)));
        }
        grads
    })
}

/// Transposed convolution with kernel == stride (no overlap), weight
/// `(Ci, Co, s, s)`. The `(H*s, W*s)` result is cropped, or zero-padded
/// before the bias, to `target = (Ht, Wt)`.
pub fn conv_transpose2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    target: (usize, usize),
) -> Tensor<T> {
    let (b, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    assert_eq!(w.dim(0), ci, "conv_transpose2d: channel mismatch");
    let (co, s) = (w.dim(1), w.dim(2));
    let (ht, wt) = target;
    let hw = h * wd;
    let rows = co * s * s;
    let mut out = Tensor::zeros(&[b, co, ht, wt]);
    let mut cols = vec![T::zero(); rows * hw];
    for bi in 0..b {
        gemm(rows, ci, hw, &w.data, true, &x.data[bi * ci * hw..(bi + 1) * ci * hw], false, T::zero(), &mut cols);
        let ob = &mut out.data[bi * co * ht * wt..(bi + 1) * co * ht * wt];
        for c in 0..co {
            ob[c * ht * wt..(c + 1) * ht * wt]
                .iter_mut()
                .for_each(|v| *v = bias.data[c]);
            for i in 0..s {
                for j in 0..s {
                    let r = (c * s + i) * s + j;
                    for u in 0..h {
                        let y = u * s + i;
                        if y >= ht {
                            break;
                        }
                        for v in 0..wd {
                            let xx = v * s + j;
                            if xx >= wt {
                                break;
                            }
                            ob[(c * ht + y) * wt + xx] += cols[r * hw + u * wd + v];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    bias: Var,
    target: (usize, usize),
) -> Var {
    let out = conv_transpose2d_forward(tape.value(x), tape.value(w), tape.value(bias), target);
    tape.push("conv_transpose2d", out, &[x, w, bias], move |ctx| {
        let (x, w, gout) = (ctx.input(0), ctx.input(1), ctx.grad);
        let (b, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (co, s) = (w.dim(1), w.dim(2));
        let (ht, wt) = target;
        let hw = h * wd;
        let rows = co * s * s;
        let mut gcols = vec![T::zero(); rows * hw];
        let mut gx = Tensor::zeros(&x.shape);
        let mut gw = Tensor::zeros(&w.shape);
        let mut gbias = vec![T::zero(); co];
        for bi in 0..b {
            let gb = &gout.data[bi * co * ht * wt..(bi + 1) * co * ht * wt];
            for c in 0..co {
                gbias[c] += gb[c * ht * wt..(c + 1) * ht * wt].iter().copied().sum::<T>();
                for i in 0..s {
                    for j in 0..s {
                        let r = (c * s + i) * s + j;
                        for u in 0..h {
                            for v in 0..wd {
                                let (y, xx) = (u * s + i, v * s + j);
                                gcols[r * hw + u * wd + v] = if y < ht && xx < wt {
                                    gb[(c * ht + y) * wt + xx]
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                }
            }
            let xb = &x.data[bi * ci * hw..(bi + 1) * ci * hw];
            gemm(ci, hw, rows, xb, false, &gcols, true, T::one(), &mut gw.data);
            if ctx.needs(0) {
                gemm(ci, rows, hw, &w.data, false, &gcols, false, T::zero(), &mut gx.data[bi * ci * hw..(bi + 1) * ci * hw]);
            }
        }
        vec![
            ctx.needs(0).then_some(gx),
            Some(gw),
            Some(Tensor::from_vec(&[co], gbias)),
        ]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_op, random_tensor, GradcheckOpts};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], spec: Conv2dSpec) -> Tensor<f64> {
        let (b, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (co, k) = (w.dim(0), w.dim(2));
        let (ho, wo) = (spec.out_size(h, k), spec.out_size(wd, k));
        let mut out = Tensor::zeros(&[b, co, ho, wo]);
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.data[((o * ci + c) * k + ky) * k + kx]
                                            * x.data[((bi * ci + c) * h + iy as usize) * wd + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data[((bi * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (spec, k, h, w) in [
            (Conv2dSpec::SAME3, 3, 5, 6),
            (Conv2dSpec::DOWN3, 3, 7, 6),
            (Conv2dSpec::POINTWISE, 1, 4, 3),
        ] {
            let x = random_tensor(&[2, 3, h, w], &mut rng);
            let wt = random_tensor(&[4, 3, k, k], &mut rng);
            let bias = random_tensor(&[4], &mut rng);
            let got = conv2d_forward(&x, &wt, Some(&bias), spec);
            let want = conv_oracle(&x, &wt, &bias.data, spec);
            assert_eq!(got.shape, want.shape);
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn down_conv_uses_ceil_division() {
        for n in 1..20 {
            assert_eq!(Conv2dSpec::DOWN3.out_size(n, 3), n.div_ceil(2));
            assert_eq!(Conv2dSpec::SAME3.out_size(n, 3), n);
        }
    }

    #[test]
    fn conv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for spec in [Conv2dSpec::SAME3, Conv2dSpec::DOWN3] {
            let x = random_tensor(&[2, 2, 5, 4], &mut rng);
            let w = random_tensor(&[3, 2, 3, 3], &mut rng);
            let b = random_tensor(&[3], &mut rng);
            let r = check_op(&[x, w, b], GradcheckOpts::default(), |tape, v| {
                conv2d(tape, v[0], v[1], Some(v[2]), spec)
            });
            assert!(r.max_rel_err <= 1e-5, "{spec:?}: {r:?}");
        }
    }

    #[test]
    fn transpose_matches_scatter_oracle_and_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&[1, 2, 3, 2], &mut rng);
        let w = random_tensor(&[2, 3, 2, 2], &mut rng);
        let b = random_tensor(&[3], &mut rng);
        // (6, 4) -> crop to (5, 4)
        let out = conv_transpose2d_forward(&x, &w, &b, (5, 4));
        for c in 0..3 {
            for y in 0..5 {
                for xx in 0..4 {
                    let (u, i, v, j) = (y / 2, y % 2, xx / 2, xx % 2);
                    let mut want = b.data[c];
                    for ci in 0..2 {
                        want += x.data[(ci * 3 + u) * 2 + v] * w.data[((ci * 3 + c) * 2 + i) * 2 + j];
                    }
                    assert!((out.data[(c * 5 + y) * 4 + xx] - want).abs() < 1e-12);
                }
            }
        }
        for target in [(5, 4), (6, 4), (7, 5)] {
            let r = check_op(&[x.clone(), w.clone(), b.clone()], GradcheckOpts::default(), |tape, v| {
                conv_transpose2d(tape, v[0], v[1], v[2], target)
            });
            assert!(r.max_rel_err <= 1e-5, "{target:?}: {r:?}");
        }
    }
}
