// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use rand::Rng;

use super::rulebook::{Rulebook, SparseConvKind, TAPS};
use crate::autodiff::{Tape, Var};
use crate::linalg::gemm;
use crate::nn::{BatchNorm, Fwd};
use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Gather-GEMM-scatter forward. `w` is `(27, Ci, Co)`.
pub fn sparse_conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, rb: &Rulebook) -> Tensor<T> {
    let (ci, co) = (w.dim(1), w.dim(2));
    assert_eq!(x.dim(1), ci, "sparse conv: channel mismatch");
    assert_eq!(x.dim(0), rb.in_len, "sparse conv: rulebook built for another volume");
    let m = rb.out_coords.len();
    let mut out = Tensor::zeros(&[m, co]);
    if let Some(b) = bias {
        for row in out.data.chunks_mut(co) {
            row.copy_from_slice(&b.data);
        }
    }
    let mut gathered = Vec::new();
    let mut prod = Vec::new();
    for (k, pairs) in rb.pairs.iter().enumerate() {
        let n = pairs.len();
        if n == 0 {
            continue;
        }
        gathered.clear();
        for &(i, _) in pairs {
            gathered.extend_from_slice(&x.data[i as usize * ci..(i as usize + 1) * ci]);
        }
        prod.clear();
        prod.resize(n * co, T::zero());
        gemm(n, ci, co, &gathered, false, &w.data[k * ci * co..(k + 1) * ci * co], false, T::zero(), &mut prod);
        for (p, &(_, o)) in pairs.iter().enumerate() {
            let dst = &mut out.data[o as usize * co..(o as usize + 1) * co];
            for (d, s) in dst.iter_mut().zip(&prod[p * co..(p + 1) * co]) {
                *d += *s;
            }
        }
    }
    out
}

/// Sparse 3x3x3 convolution on the tape: `(N, Ci) -> (M, Co)`.
pub fn sparse_conv<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>, rb: Arc<Rulebook>) -> Var {
    let out = sparse_conv_forward(tape.value(x), tape.value(w), bias.map(|b| tape.value(b)), &rb);
    let mut parents = vec![x, w];
    parents.extend(bias);
    tape.push("sparse_conv", out, &parents, move |ctx| {
        let (x, w, g) = (ctx.input(0), ctx.input(1), ctx.grad);
        let (ci, co) = (w.dim(1), w.dim(2));
        let mut gx = Tensor::zeros(&x.shape);
        let mut gw = Tensor::zeros(&w.shape);
        let mut gin = Vec::new();
        let mut gout = Vec::new();
        let mut back = Vec::new();
        for (k, pairs) in rb.pairs.iter().enumerate() {
            let n = pairs.len();
            if n == 0 {
                continue;
            }
            gin.clear();
            gout.clear();
            for &(i, o) in pairs {
                gin.extend_from_slice(&x.data[i as usize * ci..(i as usize + 1) * ci]);
                gout.extend_from_slice(&g.data[o as usize * co..(o as usize + 1) * co]);
            }
            // dW_k = gathered_in^T * gathered_grad
            gemm(ci, n, co, &gin, true, &gout, false, T::one(), &mut gw.data[k * ci * co..(k + 1) * ci * co]);
            if ctx.needs(0) {
                back.clear();
                back.resize(n * ci, T::zero());
                gemm(n, co, ci, &gout, false, &w.data[k * ci * co..(k + 1) * ci * co], true, T::zero(), &mut back);
                for (p, &(i, _)) in pairs.iter().enumerate() {
                    let dst = &mut gx.data[i as usize * ci..(i as usize + 1) * ci];
                    for (d, s) in dst.iter_mut().zip(&back[p * ci..(p + 1) * ci]) {
                        *d += *s;
                    }
                }
            }
        }
        let mut grads = vec![ctx.needs(0).then_some(gx), Some(gw)];
        if ctx.parents_len() == 3 {
            let mut gb = vec![T::zero(); co];
            for row in g.data.chunks(co) {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += *v;
                }
            }
            grads.push(Some(Tensor::from_vec(&[co], gb)));
        }
        grads
    })
}

/// Sparse convolution followed by batch norm over the active sites and an
/// optional ReLU.
#[derive(Clone, Debug)]
pub struct SparseConvLayer {
    pub kind: SparseConvKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub w: ParamId,
    pub b: ParamId,
    pub bn: Option<BatchNorm>,
}

impl SparseConvLayer {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        kind: SparseConvKind,
        in_ch: usize,
        out_ch: usize,
        norm: bool,
    ) -> Self {
        let w = store.add_kaiming(format!("{prefix}.w"), &[TAPS, in_ch, out_ch], in_ch * TAPS, rng);
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[out_ch]), true);
        let bn = norm.then(|| BatchNorm::new(store, &format!("{prefix}.bn"), out_ch));
        Self {
            kind,
            in_ch,
            out_ch,
            w,
            b,
            bn,
        }
    }

    /// Convolution and norm, without the activation.
    pub fn forward_linear<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var, rb: &Arc<Rulebook>) -> Var {
        assert_eq!(rb.kind, self.kind, "rulebook kind does not match layer");
        let w = f.param(self.w);
        let b = f.param(self.b);
        let y = sparse_conv(&mut f.tape, x, w, Some(b), rb.clone());
        match &self.bn {
            Some(bn) => bn.forward(f, y),
            None => y,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var, rb: &Arc<Rulebook>) -> Var {
        let y = self.forward_linear(f, x, rb);
        ops::relu(&mut f.tape, y)
    }
}

#[cfg(test)]
mod tests {
    use super::super::rulebook::{build_rulebook, tap_offset};
    use super::*;
    use crate::gradcheck::{check_op, random_tensor, GradcheckOpts};
    use crate::voxel_grid::VoxelCoord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_coords<R: Rng>(rng: &mut R, n: usize, density: f64) -> Vec<VoxelCoord> {
        let mut v = Vec::new();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    if rng.random_bool(density) {
                        v.push(VoxelCoord::new(0, x as u32, y as u32, z as u32));
                    }
                }
            }
        }
        v
    }

    /// Dense 3D cross-correlation of a zero-filled grid, read at `outs`.
    fn dense_oracle(
        coords: &[VoxelCoord],
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &[f64],
        n: usize,
        stride: usize,
        outs: &[VoxelCoord],
    ) -> Vec<f64> {
        let (ci, co) = (w.dim(1), w.dim(2));
        let mut grid = vec![0.0; n * n * n * ci];
        for (i, c) in coords.iter().enumerate() {
            let off = ((c.x as usize * n + c.y as usize) * n + c.z as usize) * ci;
            grid[off..off + ci].copy_from_slice(&x.data[i * ci..(i + 1) * ci]);
        }
        let mut out = Vec::new();
        for o in outs {
            for oc in 0..co {
                let mut acc = bias[oc];
                for k in 0..27 {
                    let d = tap_offset(k);
                    let p = [
                        (stride * o.x as usize) as i64 + d[0],
                        (stride * o.y as usize) as i64 + d[1],
                        (stride * o.z as usize) as i64 + d[2],
                    ];
                    if p.iter().any(|&v| v < 0 || v >= n as i64) {
                        continue;
                    }
                    let off = ((p[0] as usize * n + p[1] as usize) * n + p[2] as usize) * ci;
                    for c in 0..ci {
                        acc += grid[off + c] * w.data[(k * ci + c) * co + oc];
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (kind, stride) in [(SparseConvKind::Submanifold, 1), (SparseConvKind::Strided, 2)] {
            let coords = random_coords(&mut rng, 8, 0.2);
            let x = random_tensor(&[coords.len(), 3], &mut rng);
            let w = random_tensor(&[27, 3, 4], &mut rng);
            let b = random_tensor(&[4], &mut rng);
            let rb = build_rulebook(&coords, [8, 8, 8], kind);
            let y = sparse_conv_forward(&x, &w, Some(&b), &rb);
            let want = dense_oracle(&coords, &x, &w, &b.data, 8, stride, &rb.out_coords);
            let err = y.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{kind:?}: {err}");
        }
    }

    #[test]
    fn identity_kernel_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = random_coords(&mut rng, 6, 0.3);
        let x = random_tensor(&[coords.len(), 2], &mut rng);
        let mut w = Tensor::zeros(&[27, 2, 2]);
        w.data[13 * 4] = 1.0;
        w.data[13 * 4 + 3] = 1.0;
        let rb = build_rulebook(&coords, [6, 6, 6], SparseConvKind::Submanifold);
        let y = sparse_conv_forward(&x, &w, None, &rb);
        assert_eq!(y, x);
        let rb = build_rulebook(&[], [6, 6, 6], SparseConvKind::Strided);
        let y = sparse_conv_forward(&Tensor::<f64>::zeros(&[0, 2]), &w, None, &rb);
        assert_eq!(y.shape, vec![0, 2]);
    }

    #[test]
    fn gradcheck_on_4_cubed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [SparseConvKind::Submanifold, SparseConvKind::Strided] {
            let coords = random_coords(&mut rng, 4, 0.4);
            let rb = Arc::new(build_rulebook(&coords, [4, 4, 4], kind));
            let x = random_tensor(&[coords.len(), 2], &mut rng);
            let w = random_tensor(&[27, 2, 3], &mut rng);
            let b = random_tensor(&[3], &mut rng);
            let r = check_op(&[x, w, b], GradcheckOpts::default(), |t, v| {
                sparse_conv(t, v[0], v[1], Some(v[2]), rb.clone())
            });
            assert!(r.max_rel_err <= 1e-5, "{kind:?}: {r:?}");
        }
    }
}
