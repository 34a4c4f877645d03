// SPDX-License-Identifier: Apache-2.0

//! Parameterised layers built from the tape ops: dense convolutions with
//! batch norm, and the forward context that collects batch statistics.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::ops::{self, BnMode, BnStats, Conv2dSpec};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics observed in a training-mode forward, to be folded into
/// the running estimates after the step.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BnStats<T>,
}

/// Everything a layer needs during one forward pass.
pub struct Fwd<'a, T> {
    pub tape: Tape<T>,
    pub store: &'a ParamStore<T>,
    pub mode: BnMode,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> Fwd<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: BnMode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Fold observed batch statistics into the running estimates
/// (the variance estimate uses the unbiased batch variance).
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = T::lit(BN_MOMENTUM);
    for u in updates {
        if u.stats.count == 0 {
            continue;
        }
        let n = u.stats.count as f64;
        let unbias = T::lit(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        let rm = &mut store.get_mut(u.mean).value.data;
        for (r, s) in rm.iter_mut().zip(&u.stats.mean) {
            *r = (T::one() - m) * *r + m * *s;
        }
        let rv = &mut store.get_mut(u.var).value.data;
        for (r, s) in rv.iter_mut().zip(&u.stats.var) {
            *r = (T::one() - m) * *r + m * *s * unbias;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[c], T::one()), true),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[c]), true),
            mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false),
            var: store.add(format!("{prefix}.running_var"), Tensor::full(&[c], T::one()), false),
        }
    }

    /// Normalise `x` laid out as `(N, C, ...)`.
    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Var {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        let rm = f.store.get(self.mean).value.data.clone();
        let rv = f.store.get(self.var).value.data.clone();
        let (y, stats) = ops::batch_norm(&mut f.tape, x, g, b, (&rm, &rv), f.mode);
        if let Some(stats) = stats {
            f.bn_updates.push(BnUpdate {
                mean: self.mean,
                var: self.var,
                stats,
            });
        }
        y
    }
}

/// Plain convolution, optionally with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        ci: usize,
        co: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let w = store.add_kaiming(format!("{prefix}.w"), &[co, ci, k, k], ci * k * k, rng);
        let b = bias.then(|| store.add(format!("{prefix}.b"), Tensor::zeros(&[co]), true));
        Self { w, b, spec }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Var {
        let w = f.param(self.w);
        let b = self.b.map(|b| f.param(b));
        ops::conv2d(&mut f.tape, x, w, b, self.spec)
    }
}

/// Convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        ci: usize,
        co: usize,
        spec: Conv2dSpec,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{prefix}.conv"), ci, co, 3, spec, false),
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), co),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Var {
        let y = self.conv.forward(f, x);
        let y = self.bn.forward(f, y);
        ops::relu(&mut f.tape, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn running_stats_update() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let updates = {
            let mut f = Fwd::new(&store, BnMode::Train);
            let xv = f.tape.constant(x);
            bn.forward(&mut f, xv);
            f.bn_updates
        };
        apply_bn_updates(&mut store, &updates);
        assert!((store.get(bn.mean).value.data[0] - 0.25).abs() < 1e-12);
        // unbiased variance 5/3
        let expect = 0.9 + 0.1 * 5.0 / 3.0;
        assert!((store.get(bn.var).value.data[0] - expect).abs() < 1e-12);
        assert!(!store.get(bn.mean).trainable);
    }

    #[test]
    fn conv_bn_relu_is_nonnegative() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let l = ConvBnRelu::new(&mut store, &mut rng, "l", 2, 3, Conv2dSpec::SAME3);
        let mut f = Fwd::new(&store, BnMode::Train);
        let x = f.tape.constant(crate::gradcheck::random_tensor(&[2, 2, 4, 4], &mut rng).cast());
        let y = l.forward(&mut f, x);
        assert_eq!(f.tape.value(y).shape, vec![2, 3, 4, 4]);
        assert!(f.tape.value(y).data.iter().all(|&v| v >= 0.0));
        assert_eq!(f.bn_updates.len(), 1);
    }
}
