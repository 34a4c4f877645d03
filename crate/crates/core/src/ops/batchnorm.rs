// SPDX-License-Identifier: Apache-2.0

use crate::autodiff::{Tape, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with the stored running statistics.
    Eval,
}

/// Per-channel batch statistics (biased variance).
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Input viewed as `(n, c, s)`: dense maps are `(B, C, H*W)`, sparse
/// features are `(N, C, 1)`.
fn layout<T: Real>(x: &Tensor<T>) -> (usize, usize, usize) {
    let n = x.shape[0];
    let c = x.shape[1];
    let s: usize = x.shape[2..].iter().product();
    (n, c, s)
}

fn channel_stats<T: Real>(x: &Tensor<T>) -> BnStats<T> {
    let (n, c, s) = layout(x);
    let count = n * s;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    if count == 0 {
        return BnStats { mean, var, count };
    }
    let inv = T::one() / T::lit(count as f64);
    for ci in 0..c {
        let mut acc = T::zero();
        for ni in 0..n {
            let off = (ni * c + ci) * s;
            acc += x.data[off..off + s].iter().copied().sum::<T>();
        }
        let m = acc * inv;
        let mut v = T::zero();
        for ni in 0..n {
            let off = (ni * c + ci) * s;
            v += x.data[off..off + s]
                .iter()
                .map(|&e| (e - m) * (e - m))
                .sum::<T>();
        }
        mean[ci] = m;
        var[ci] = v * inv;
    }
    BnStats { mean, var, count }
}

/// Plain forward without a tape; returns the normalised output and, in
/// training mode, the batch statistics.
pub fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: (&[T], &[T]),
    mode: BnMode,
) -> (Tensor<T>, Option<BnStats<T>>) {
    let (n, c, s) = layout(x);
    let (stats, mean, var) = match mode {
        BnMode::Train => {
            let st = channel_stats(x);
            let (m, v) = (st.mean.clone(), st.var.clone());
            (Some(st), m, v)
        }
        BnMode::Eval => (None, running.0.to_vec(), running.1.to_vec()),
    };
    let eps = T::lit(BN_EPS);
    let mut out = Tensor::zeros(&x.shape);
    for ci in 0..c {
        let inv_std = T::one() / (var[ci] + eps).sqrt();
        let (g, b, m) = (gamma[ci], beta[ci], mean[ci]);
        for ni in 0..n {
            let off = (ni * c + ci) * s;
            for (o, &e) in out.data[off..off + s].iter_mut().zip(&x.data[off..off + s]) {
                *o = g * (e - m) * inv_std + b;
            }
        }
    }
    (out, stats)
}

/// Batch normalisation with affine parameters `gamma`, `beta` (both `(C,)`).
/// `running` holds the running mean/variance used in [`BnMode::Eval`].
pub fn batch_norm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running: (&[T], &[T]),
    mode: BnMode,
) -> (Var, Option<BnStats<T>>) {
    let (out, stats) = batch_norm_forward(
        tape.value(x),
        &tape.value(gamma).data,
        &tape.value(beta).data,
        running,
        mode,
    );
    let (mean, var) = match &stats {
        Some(st) => (st.mean.clone(), st.var.clone()),
        None => (running.0.to_vec(), running.1.to_vec()),
    };
    let v = tape.push("batch_norm", out, &[x, gamma, beta], move |ctx| {
        let x = ctx.input(0);
        let gamma = &ctx.input(1).data;
        let g = ctx.grad;
        let (n, c, s) = layout(x);
        let eps = T::lit(BN_EPS);
        let count = n * s;
        let mut gx = Tensor::zeros(&x.shape);
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        if count == 0 {
            return vec![
                Some(gx),
                Some(Tensor::from_vec(&[c], ggamma)),
                Some(Tensor::from_vec(&[c], gbeta)),
            ];
        }
        for ci in 0..c {
            let inv_std = T::one() / (var[ci] + eps).sqrt();
            let m = mean[ci];
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for ni in 0..n {
                let off = (ni * c + ci) * s;
                for (gv, xv) in g.data[off..off + s].iter().zip(&x.data[off..off + s]) {
                    sg += *gv;
                    sgx += *gv * (*xv - m) * inv_std;
                }
            }
            gbeta[ci] = sg;
            ggamma[ci] = sgx;
            match mode {
                BnMode::Train => {
                    let inv_n = T::one() / T::lit(count as f64);
                    let k = gamma[ci] * inv_std;
                    for ni in 0..n {
                        let off = (ni * c + ci) * s;
                        for i in off..off + s {
                            let xh = (x.data[i] - m) * inv_std;
                            gx.data[i] = k * (g.data[i] - sg * inv_n - xh * sgx * inv_n);
                        }
                    }
                }
                BnMode::Eval => {
                    let k = gamma[ci] * inv_std;
                    for ni in 0..n {
                        let off = (ni * c + ci) * s;
                        for i in off..off + s {
                            gx.data[i] = k * g.data[i];
                        }
                    }
                }
            }
        }
        vec![
            ctx.needs(0).then_some(gx),
            Some(Tensor::from_vec(&[c], ggamma)),
            Some(Tensor::from_vec(&[c], gbeta)),
        ]
    });
    (v, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_op, random_tensor, GradcheckOpts};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_normalises() {
        let x = Tensor::from_vec(&[4, 1], vec![1.0f64, 2.0, 3.0, 4.0]);
        let (y, st) = batch_norm_forward(&x, &[1.0], &[0.0], (&[0.0], &[1.0]), BnMode::Train);
        let st = st.unwrap();
        assert!((st.mean[0] - 2.5).abs() < 1e-12);
        assert!((st.var[0] - 1.25).abs() < 1e-12);
        let s: f64 = y.data.iter().sum();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn gradcheck_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&[2, 3, 5], &mut rng);
        let gamma = random_tensor(&[3], &mut rng);
        let beta = random_tensor(&[3], &mut rng);
        for mode in [BnMode::Train, BnMode::Eval] {
            let rm = vec![0.1, -0.2, 0.3];
            let rv = vec![0.5, 1.5, 2.0];
            let r = check_op(
                &[x.clone(), gamma.clone(), beta.clone()],
                GradcheckOpts::default(),
                |tape, v| batch_norm(tape, v[0], v[1], v[2], (&rm, &rv), mode).0,
            );
            assert!(r.max_rel_err <= 1e-5, "{mode:?}: {r:?}");
        }
    }
}
