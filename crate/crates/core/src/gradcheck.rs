// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference checks of analytic adjoints, run in `f64`.
//!
//! Relative error per entry is `|analytic - numeric| / max(|analytic|,
//! |numeric|, floor)`; the floor keeps entries whose true gradient is zero
//! from amplifying round-off.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::nn::Fwd;
use crate::ops::{self, BnMode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOpts {
    pub step: f64,
    pub floor: f64,
    /// Seed of the random projection turning non-scalar outputs into a loss.
    pub seed: u64,
}

impl Default for GradcheckOpts {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-3,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn merge(&mut self, other: &GradcheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
            self.analytic = other.analytic;
            self.numeric = other.numeric;
        }
        self.checked += other.checked;
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn scalar_loss<F>(tape: &mut Tape<f64>, inputs: &[Var], build: &F, opts: &GradcheckOpts) -> Var
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    use rand::SeedableRng;
    let out = build(tape, inputs);
    if tape.value(out).len() == 1 {
        return out;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let shape = tape.value(out).shape.clone();
    let w = random_tensor(&shape, &mut rng);
    ops::dot_const(tape, out, w)
}

/// Check the gradient of `build(inputs)` with respect to every input
/// element. Non-scalar outputs are projected onto fixed random weights.
pub fn check_op<F>(inputs: &[Tensor<f64>], opts: GradcheckOpts, build: F) -> GradcheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let l = scalar_loss(&mut tape, &vars, &build, &opts);
        tape.value(l).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = scalar_loss(&mut tape, &vars, &build, &opts);
    let grads = tape.backward(loss).expect("backward failed");

    let mut report = GradcheckReport::default();
    let mut vals = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.of(&tape, *v);
        for e in 0..vals[i].len() {
            let orig = vals[i].data[e];
            vals[i].data[e] = orig + opts.step;
            let fp = eval(&vals);
            vals[i].data[e] = orig - opts.step;
            let fm = eval(&vals);
            vals[i].data[e] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data[e];
            let r = rel_err(a, numeric, opts.floor);
            report.checked += 1;
            if r > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = r;
                report.worst = (i, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

/// Check the gradient of a network loss with respect to every trainable
/// parameter of `store`. `build` must be deterministic in the parameter
/// values and return a scalar.
pub fn check_params<F>(store: &mut ParamStore<f64>, mode: BnMode, opts: GradcheckOpts, build: F) -> GradcheckReport
where
    F: Fn(&mut Fwd<'_, f64>) -> Var,
{
    let eval = |store: &ParamStore<f64>| -> f64 {
        let mut f = Fwd::new(store, mode);
        let l = build(&mut f);
        f.tape.value(l).item()
    };
    let analytic: Vec<(crate::params::ParamId, Tensor<f64>)> = {
        let mut f = Fwd::new(store, mode);
        let l = build(&mut f);
        assert_eq!(f.tape.value(l).len(), 1, "check_params: loss must be scalar");
        let grads = f.tape.backward(l).expect("backward failed");
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(&p.value.shape))))
            .collect()
    };
    let mut report = GradcheckReport::default();
    for (id, g) in analytic {
        for e in 0..g.len() {
            let orig = store.get(id).value.data[e];
            store.get_mut(id).value.data[e] = orig + opts.step;
            let fp = eval(store);
            store.get_mut(id).value.data[e] = orig - opts.step;
            let fm = eval(store);
            store.get_mut(id).value.data[e] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let r = rel_err(g.data[e], numeric, opts.floor);
            report.checked += 1;
            if r > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = r;
                report.worst = (id.0, e);
                report.analytic = g.data[e];
                report.numeric = numeric;
            }
        }
    }
    report
}
