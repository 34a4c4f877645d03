// SPDX-License-Identifier: Apache-2.0

//! Differentiable building blocks shared by the sparse backbone, the BEV
//! tower and the heads. Each op records its forward value on the tape along
//! with a hand-written adjoint.

mod batchnorm;
mod conv2d;

pub use batchnorm::{batch_norm, batch_norm_forward, BnMode, BnStats};
pub use conv2d::{conv2d, conv2d_forward, conv_transpose2d, conv_transpose2d_forward, Conv2dSpec};

use crate::autodiff::{Tape, Var};
use crate::real::{sigmoid as sigm, Real};
use crate::tensor::Tensor;

pub fn add<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let (va, vb) = (tape.value(a), tape.value(b));
    assert_eq!(va.shape, vb.shape, "add: shape mismatch");
    let data = va.data.iter().zip(&vb.data).map(|(x, y)| *x + *y).collect();
    let value = Tensor::from_vec(&va.shape, data);
    tape.push("add", value, &[a, b], |ctx| {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
    })
}

/// Elementwise product; a one-element operand broadcasts.
pub fn mul<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let (va, vb) = (tape.value(a), tape.value(b));
    let value = if va.shape == vb.shape {
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| *x * *y).collect();
        Tensor::from_vec(&va.shape, data)
    } else if vb.len() == 1 {
        va.map(|x| x * vb.data[0])
    } else if va.len() == 1 {
        vb.map(|x| x * va.data[0])
    } else {
        panic!("mul: incompatible shapes {:?} and {:?}", va.shape, vb.shape);
    };
    tape.push("mul", value, &[a, b], |ctx| {
        let (va, vb, g) = (ctx.input(0), ctx.input(1), ctx.grad);
        let grad_for = |other: &Tensor<T>, me: &Tensor<T>| -> Tensor<T> {
            if me.len() == 1 && g.len() != 1 {
                let s: T = g.data.iter().zip(&other.data).map(|(g, o)| *g * *o).sum();
                Tensor::from_vec(&me.shape, vec![s])
            } else if other.len() == 1 {
                g.map(|x| x * other.data[0])
            } else {
                let data = g.data.iter().zip(&other.data).map(|(g, o)| *g * *o).collect();
                Tensor::from_vec(&me.shape, data)
            }
        };
        vec![
            ctx.needs(0).then(|| grad_for(vb, va)),
            ctx.needs(1).then(|| grad_for(va, vb)),
        ]
    })
}

pub fn relu<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let value = tape.value(x).map(|v| v.max(T::zero()));
    tape.push("relu", value, &[x], |ctx| {
        let data = ctx
            .grad
            .data
            .iter()
            .zip(&ctx.out.data)
            .map(|(g, y)| if *y > T::zero() { *g } else { T::zero() })
            .collect();
        vec![Some(Tensor::from_vec(&ctx.grad.shape, data))]
    })
}

pub fn sigmoid<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let value = tape.value(x).map(sigm);
    tape.push("sigmoid", value, &[x], |ctx| {
        let data = ctx
            .grad
            .data
            .iter()
            .zip(&ctx.out.data)
            .map(|(g, s)| *g * *s * (T::one() - *s))
            .collect();
        vec![Some(Tensor::from_vec(&ctx.grad.shape, data))]
    })
}

/// `sum_i coeffs[i] * terms[i]` over scalar terms.
pub fn weighted_total<T: Real>(tape: &mut Tape<T>, terms: &[Var], coeffs: &[f64]) -> Var {
    assert_eq!(terms.len(), coeffs.len());
    let mut total = T::zero();
    for (t, c) in terms.iter().zip(coeffs) {
        total += tape.value(*t).item() * T::lit(*c);
    }
    let coeffs: Vec<T> = coeffs.iter().map(|c| T::lit(*c)).collect();
    tape.push("weighted_total", Tensor::scalar(total), terms, move |ctx| {
        let g = ctx.grad.item();
        coeffs
            .iter()
            .map(|c| Some(Tensor::scalar(g * *c)))
            .collect()
    })
}

/// `sum_i w_i x_i` with constant weights; projects any tensor to a scalar.
pub fn dot_const<T: Real>(tape: &mut Tape<T>, x: Var, weights: Tensor<T>) -> Var {
    let vx = tape.value(x);
    assert_eq!(vx.len(), weights.len());
    let s = vx.data.iter().zip(&weights.data).map(|(a, b)| *a * *b).sum();
    tape.push("dot_const", Tensor::scalar(s), &[x], move |ctx| {
        let g = ctx.grad.item();
        vec![Some(weights.map(|w| w * g))]
    })
}

/// Concatenate `(B, C_i, H, W)` tensors along the channel axis.
pub fn concat_channels<T: Real>(tape: &mut Tape<T>, xs: &[Var]) -> Var {
    let first = tape.value(xs[0]);
    let (b, h, w) = (first.dim(0), first.dim(2), first.dim(3));
    let chans: Vec<usize> = xs.iter().map(|v| tape.value(*v).dim(1)).collect();
    let total: usize = chans.iter().sum();
    let plane = h * w;
    let mut out = Tensor::zeros(&[b, total, h, w]);
    for bi in 0..b {
        let mut c0 = 0;
        for (v, &c) in xs.iter().zip(&chans) {
            let t = tape.value(*v);
            assert_eq!((t.dim(0), t.dim(2), t.dim(3)), (b, h, w), "concat: shape mismatch");
            let src = &t.data[bi * c * plane..(bi + 1) * c * plane];
            let dst_off = (bi * total + c0) * plane;
            out.data[dst_off..dst_off + c * plane].copy_from_slice(src);
            c0 += c;
        }
    }
    tape.push("concat", out, xs, move |ctx| {
        let g = ctx.grad;
        let mut grads = Vec::with_capacity(chans.len());
        let mut c0 = 0;
        for (i, &c) in chans.iter().enumerate() {
            if !ctx.needs(i) {
                grads.push(None);
                c0 += c;
                continue;
            }
            let mut gi = Tensor::zeros(&[b, c, h, w]);
            for bi in 0..b {
                let src_off = (bi * total + c0) * plane;
                gi.data[bi * c * plane..(bi + 1) * c * plane]
                    .copy_from_slice(&g.data[src_off..src_off + c * plane]);
            }
            grads.push(Some(gi));
            c0 += c;
        }
        grads
    })
}
