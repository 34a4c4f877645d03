// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use rand::Rng;

use super::conv::SparseConvLayer;
use super::rulebook::{build_rulebook, Rulebook, SparseConvKind};
use super::SparseVar;
use crate::nn::Fwd;
use crate::ops;
use crate::params::ParamStore;
use crate::real::Real;
use crate::voxel_grid::SparseVolume;

/// Identity plus two submanifold convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: SparseConvLayer,
    pub conv2: SparseConvLayer,
}

impl ResBlock {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, prefix: &str, c: usize) -> Self {
        let k = SparseConvKind::Submanifold;
        Self {
            conv1: SparseConvLayer::new(store, rng, &format!("{prefix}.conv1"), k, c, c, true),
            conv2: SparseConvLayer::new(store, rng, &format!("{prefix}.conv2"), k, c, c, true),
        }
    }

    fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: crate::autodiff::Var, rb: &Arc<Rulebook>) -> crate::autodiff::Var {
        let h = self.conv1.forward(f, x, rb);
        let h = self.conv2.forward_linear(f, h, rb);
        let s = ops::add(&mut f.tape, x, h);
        ops::relu(&mut f.tape, s)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub entry: SparseConvLayer,
    pub blocks: Vec<ResBlock>,
}

/// Four stages at 1x, 2x, 4x and 8x downsampling. Stage 1 enters with a
/// submanifold convolution, later stages with a strided one.
#[derive(Clone, Debug)]
pub struct ResVoxelNet {
    pub stages: Vec<Stage>,
}

impl ResVoxelNet {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, in_ch: usize, channels: [usize; 4], n_res: usize) -> Self {
        let mut stages = Vec::new();
        let mut prev = in_ch;
        for (s, &c) in channels.iter().enumerate() {
            let kind = if s == 0 {
                SparseConvKind::Submanifold
            } else {
                SparseConvKind::Strided
            };
            let prefix = format!("backbone.stage{}", s + 1);
            let entry = SparseConvLayer::new(store, rng, &format!("{prefix}.entry"), kind, prev, c, true);
            let blocks = (0..n_res)
                .map(|i| ResBlock::new(store, rng, &format!("{prefix}.res{i}"), c))
                .collect();
            stages.push(Stage { entry, blocks });
            prev = c;
        }
        Self { stages }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.entry.out_ch)
    }

    /// Output spatial shape for an input grid: ceil division by 8.
    pub fn out_shape(input: [usize; 3]) -> [usize; 3] {
        input.map(|d| d.div_ceil(2).div_ceil(2).div_ceil(2))
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, input: &SparseVolume<T>) -> SparseVar {
        let mut coords = input.coords.clone();
        let mut shape = input.spatial_shape;
        let mut x = f.tape.constant(input.feats.clone());
        for stage in &self.stages {
            let entry_rb = Arc::new(build_rulebook(&coords, shape, stage.entry.kind));
            x = stage.entry.forward(f, x, &entry_rb);
            coords = entry_rb.out_coords.clone();
            shape = entry_rb.out_shape;
            let subm = if entry_rb.kind == SparseConvKind::Submanifold {
                entry_rb
            } else {
                Arc::new(build_rulebook(&coords, shape, SparseConvKind::Submanifold))
            };
            for block in &stage.blocks {
                x = block.forward(f, x, &subm);
            }
        }
        SparseVar {
            coords,
            feats: x,
            spatial_shape: shape,
            batch_size: input.batch_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::BnMode;
    use crate::sparse_backbone::rulebook::tap_offset;
    use crate::tensor::Tensor;
    use crate::voxel_grid::VoxelCoord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn out_shapes() {
        assert_eq!(ResVoxelNet::out_shape([1408, 1600, 40]), [176, 200, 5]);
        assert_eq!(ResVoxelNet::out_shape([64, 64, 16]), [8, 8, 2]);
        assert_eq!(ResVoxelNet::out_shape([8, 8, 8]), [1, 1, 1]);
    }

    #[test]
    fn zero_input_zero_params_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let net = ResVoxelNet::new(&mut store, &mut rng, 4, [4, 4, 4, 4], 1);
        for p in store.iter_mut() {
            if p.name.ends_with(".w") {
                p.value.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let coords = vec![VoxelCoord::new(0, 1, 2, 3), VoxelCoord::new(0, 5, 5, 5)];
        let vol = SparseVolume {
            coords,
            feats: Tensor::zeros(&[2, 4]),
            spatial_shape: [16, 16, 16],
            batch_size: 1,
        };
        let mut f = Fwd::new(&store, BnMode::Eval);
        let out = net.forward(&mut f, &vol);
        assert_eq!(out.spatial_shape, [2, 2, 2]);
        assert!(f.tape.value(out.feats).data.iter().all(|&v| v == 0.0));
    }

    /// Dense reference network: every layer is a dense convolution over the
    /// full grid followed by masking to the sparse output set.
    #[test]
    fn dense_equivalence_16_cubed() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::<f32>::new();
        let net = ResVoxelNet::new(&mut store, &mut rng, 4, [4, 6, 6, 8], 1);
        // non-trivial running statistics and affine terms
        for p in store.iter_mut() {
            if p.name.ends_with("running_var") {
                p.value.data.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
            } else if p.name.ends_with("running_mean") || p.name.ends_with(".b") || p.name.ends_with("beta") {
                p.value.data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        }
        let n = 16;
        let mut coords = Vec::new();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    if rng.random_bool(0.08) {
                        coords.push(VoxelCoord::new(0, x, y, z));
                    }
                }
            }
        }
        let feats: Vec<f32> = (0..coords.len() * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vol = SparseVolume {
            coords: coords.clone(),
            feats: Tensor::from_vec(&[coords.len(), 4], feats.clone()),
            spatial_shape: [16, 16, 16],
            batch_size: 1,
        };
        let mut f = Fwd::new(&store, BnMode::Eval);
        let out = net.forward(&mut f, &vol);
        let sparse_out = f.tape.value(out.feats).clone();

        // dense grids: (n^3, C) plus an activity mask
        let mut size = n as usize;
        let mut grid = vec![0.0f64; size.pow(3) * 4];
        let mut mask = vec![false; size.pow(3)];
        for (i, c) in coords.iter().enumerate() {
            let idx = (c.x as usize * size + c.y as usize) * size + c.z as usize;
            mask[idx] = true;
            for ch in 0..4 {
                grid[idx * 4 + ch] = feats[i * 4 + ch] as f64;
            }
        }
        let layer = |grid: &[f64], mask: &[bool], size: usize, l: &SparseConvLayer, relu: bool| {
            let stride = if l.kind == SparseConvKind::Strided { 2 } else { 1 };
            let osize = size.div_ceil(stride);
            let (ci, co) = (l.in_ch, l.out_ch);
            let w = &store.get(l.w).value.data;
            let b = &store.get(l.b).value.data;
            let bn = l.bn.as_ref().unwrap();
            let g = &store.get(bn.gamma).value.data;
            let be = &store.get(bn.beta).value.data;
            let rm = &store.get(bn.mean).value.data;
            let rv = &store.get(bn.var).value.data;
            let mut out = vec![0.0f64; osize.pow(3) * co];
            let mut omask = vec![false; osize.pow(3)];
            for ox in 0..osize {
                for oy in 0..osize {
                    for oz in 0..osize {
                        let oidx = (ox * osize + oy) * osize + oz;
                        let mut any = false;
                        let mut acc: Vec<f64> = b.iter().map(|&v| v as f64).collect();
                        for k in 0..27 {
                            let d = tap_offset(k);
                            let p = [(stride * ox) as i64 + d[0], (stride * oy) as i64 + d[1], (stride * oz) as i64 + d[2]];
                            if p.iter().any(|&v| v < 0 || v >= size as i64) {
                                continue;
                            }
                            let idx = (p[0] as usize * size + p[1] as usize) * size + p[2] as usize;
                            any |= mask[idx];
                            for c in 0..ci {
                                for o in 0..co {
                                    acc[o] += grid[idx * ci + c] * w[(k * ci + c) * co + o] as f64;
                                }
                            }
                        }
                        let active = if stride == 1 { mask[oidx] } else { any };
                        if !active {
                            continue;
                        }
                        omask[oidx] = true;
                        for o in 0..co {
                            let v = g[o] as f64 * (acc[o] - rm[o] as f64) / (rv[o] as f64 + 1e-3).sqrt() + be[o] as f64;
                            out[oidx * co + o] = if relu { v.max(0.0) } else { v };
                        }
                    }
                }
            }
            (out, omask, osize)
        };
        for stage in &net.stages {
            let (g1, m1, s1) = layer(&grid, &mask, size, &stage.entry, true);
            grid = g1;
            mask = m1;
            size = s1;
            for blk in &stage.blocks {
                let (h, _, _) = layer(&grid, &mask, size, &blk.conv1, true);
                let (h, _, _) = layer(&h, &mask, size, &blk.conv2, false);
                for i in 0..grid.len() {
                    if mask[i / blk.conv2.out_ch] {
                        grid[i] = (grid[i] + h[i]).max(0.0);
                    }
                }
            }
        }
        let c = net.out_channels();
        let mut err = 0.0f64;
        let mut count = 0;
        for (i, k) in out.coords.iter().enumerate() {
            let idx = (k.x as usize * size + k.y as usize) * size + k.z as usize;
            assert!(mask[idx]);
            count += 1;
            for ch in 0..c {
                err = err.max((sparse_out.data[i * c + ch] as f64 - grid[idx * c + ch]).abs());
            }
        }
        assert_eq!(count, mask.iter().filter(|&&m| m).count());
        assert!(err <= 1e-4, "max |diff| = {err}");
    }
}
