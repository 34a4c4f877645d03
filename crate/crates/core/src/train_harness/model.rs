// SPDX-License-Identifier: Apache-2.0

//! The full detector: sparse backbone, height flattening, deformable tower
//! with attention, and the head stack.

use rand::Rng;

use super::Config;
use crate::adfa::{flatten_height, mask_focal_loss, Adfa, AdfaOut, TowerConfig};
use crate::autodiff::{Tape, Var};
use crate::data_ingest::Box3D;
use crate::decoder_eval::{detect, Detection, HeadMaps, ScoreMode};
use crate::detect_head::{head_losses, HeadLosses, HeadOut, HeadStack, RotBinCodec, TargetBundle};
use crate::error::Result;
use crate::iou_conf::{iou_conf_loss, select_confidence_samples, ConfidenceSample};
use crate::nn::Fwd;
use crate::ops::{weighted_total, BnMode};
use crate::params::ParamStore;
use crate::real::Real;
use crate::sparse_backbone::{ResVoxelNet, SparseVar};
use crate::voxel_grid::{BevGeometry, SparseVolume, VoxelGridSpec};

/// Stride of the backbone in every axis.
pub const BEV_STRIDE: usize = 8;
/// Per-voxel input features: mean `(x, y, z, r)`.
pub const IN_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid: VoxelGridSpec,
    pub backbone_channels: [usize; 4],
    pub n_res: usize,
    pub tower_channels: usize,
    pub n_lvl: usize,
    pub c2: usize,
    pub attention_channels: usize,
    pub head_channels: usize,
    pub num_classes: usize,
    pub rot_bins: usize,
    pub size_prior: [f64; 3],
}

impl ModelConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            grid: cfg.grid()?,
            backbone_channels: cfg.backbone_channels,
            n_res: cfg.n_res,
            tower_channels: cfg.tower_channels,
            n_lvl: cfg.n_lvl,
            c2: cfg.c2,
            attention_channels: cfg.attention_channels,
            head_channels: cfg.head_channels,
            num_classes: cfg.num_classes(),
            rot_bins: cfg.rot_bins,
            size_prior: cfg.size_prior,
        })
    }

    /// Height cells left after the backbone.
    pub fn bev_height(&self) -> usize {
        ResVoxelNet::out_shape(self.grid.resolution)[2]
    }

    /// Channels of the flattened BEV map, `C1 * H`.
    pub fn bev_channels(&self) -> usize {
        self.backbone_channels[3] * self.bev_height()
    }

    pub fn geometry(&self) -> BevGeometry {
        BevGeometry::new(&self.grid, BEV_STRIDE)
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: ResVoxelNet,
    pub adfa: Adfa,
    pub heads: HeadStack,
}

#[derive(Clone, Debug)]
pub struct DetectorOut {
    pub voxels: SparseVar,
    /// Flattened BEV input of the tower, `F0`.
    pub f0: Var,
    pub adfa: AdfaOut,
    pub heads: HeadOut,
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub head: HeadLosses,
    pub iou: Var,
    pub sem: Var,
    pub total: Var,
}

/// Scalar loss values, as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub cls: f64,
    pub boxes: f64,
    pub iou: f64,
    pub sem: f64,
    pub total: f64,
}

impl Losses {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).item().f64();
        LossValues {
            cls: v(self.head.cls),
            boxes: v(self.head.boxes),
            iou: v(self.iou),
            sem: v(self.sem),
            total: v(self.total),
        }
    }
}

impl Detector {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: ModelConfig) -> Self {
        let backbone = ResVoxelNet::new(store, rng, IN_CHANNELS, cfg.backbone_channels, cfg.n_res);
        let tower = TowerConfig {
            in_ch: cfg.bev_channels(),
            level_ch: cfg.tower_channels,
            n_lvl: cfg.n_lvl,
            out_ch: cfg.c2,
        };
        let adfa = Adfa::new(store, rng, tower, cfg.attention_channels);
        let heads = HeadStack::new(
            store,
            rng,
            cfg.c2,
            cfg.head_channels,
            cfg.num_classes,
            cfg.rot_bins,
            cfg.size_prior,
        );
        Self {
            cfg,
            backbone,
            adfa,
            heads,
        }
    }

    pub fn codec(&self) -> RotBinCodec {
        RotBinCodec::new(self.cfg.rot_bins)
    }

    /// With `iou_detach` the IoU branch reads a constant copy of `G`, so its
    /// loss only trains that branch.
    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, input: &SparseVolume<T>, iou_detach: bool) -> DetectorOut {
        let voxels = self.backbone.forward(f, input);
        let f0 = flatten_height(&mut f.tape, &voxels);
        let adfa = self.adfa.forward(f, f0);
        let g_iou = if iou_detach {
            let g = f.tape.value(adfa.g).clone();
            f.tape.constant(g)
        } else {
            adfa.g
        };
        let heads = self.heads.forward_split(f, adfa.g, g_iou);
        DetectorOut {
            voxels,
            f0,
            adfa,
            heads,
        }
    }

    /// IoU-branch training samples: the top `m` peaks of every scene under
    /// the current predictions.
    pub fn confidence_samples<T: Real>(
        &self,
        tape: &Tape<T>,
        out: &DetectorOut,
        gts: &[Vec<Box3D>],
        m: usize,
    ) -> Vec<ConfidenceSample> {
        let geom = self.cfg.geometry();
        let codec = self.codec();
        HeadMaps::batch(tape, &out.heads, geom)
            .iter()
            .enumerate()
            .flat_map(|(b, maps)| select_confidence_samples(b, maps, &gts[b], &codec, m))
            .collect()
    }

    /// `L_cls + L_box + L_iou + L_sem`.
    pub fn losses<T: Real>(
        &self,
        tape: &mut Tape<T>,
        out: &DetectorOut,
        bundles: &[TargetBundle],
        samples: &[ConfidenceSample],
        gammas: [f64; 5],
    ) -> Losses {
        let geom = self.cfg.geometry();
        let head = head_losses(tape, &out.heads, bundles, &geom, &self.codec(), gammas);
        let mask: Vec<f64> = bundles.iter().flat_map(|b| b.seg_mask.iter().copied()).collect();
        let sem = mask_focal_loss(tape, out.adfa.s_logits, &mask);
        let iou = iou_conf_loss(tape, out.heads.iou, samples);
        let total = weighted_total(tape, &[head.cls, head.boxes, iou, sem], &[1.0; 4]);
        Losses { head, iou, sem, total }
    }

    /// Eval-mode head maps for a batched volume.
    pub fn head_maps<T: Real>(&self, store: &ParamStore<T>, input: &SparseVolume<T>) -> Vec<HeadMaps> {
        let mut f = Fwd::new(store, BnMode::Eval);
        let out = self.forward(&mut f, input, false);
        HeadMaps::batch(&f.tape, &out.heads, self.cfg.geometry())
    }

    pub fn predict<T: Real>(
        &self,
        store: &ParamStore<T>,
        input: &SparseVolume<T>,
        top_k: usize,
        mu_cls: f64,
        mode: ScoreMode,
    ) -> Vec<Vec<Detection>> {
        let codec = self.codec();
        self.head_maps(store, input)
            .iter()
            .map(|m| detect(m, &codec, top_k, mu_cls as f32, mode))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect_head::build_targets;
    use crate::tensor::Tensor;
    use crate::voxel_grid::VoxelCoord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        let mut cfg = Config::toy();
        cfg.backbone_channels = [4, 4, 4, 4];
        cfg.tower_channels = 4;
        cfg.c2 = 4;
        cfg.attention_channels = 4;
        cfg.head_channels = 4;
        cfg.range_min = [0.0, 0.0, 0.0];
        cfg.range_max = [8.0, 8.0, 4.0];
        cfg.voxel_size = [0.5, 0.5, 0.5];
        ModelConfig::from_config(&cfg).unwrap()
    }

    fn volume(rng: &mut ChaCha8Rng, shape: [usize; 3], batch: usize) -> SparseVolume<f32> {
        let mut coords = Vec::new();
        for b in 0..batch {
            for _ in 0..30 {
                let c = VoxelCoord::new(
                    b as u32,
                    rng.random_range(0..shape[0] as u32),
                    rng.random_range(0..shape[1] as u32),
                    rng.random_range(0..shape[2] as u32),
                );
                if !coords.contains(&c) {
                    coords.push(c);
                }
            }
        }
        coords.sort();
        let n = coords.len();
        let data = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        SparseVolume {
            coords,
            feats: Tensor::from_vec(&[n, 4], data),
            spatial_shape: shape,
            batch_size: batch,
        }
    }

    #[test]
    fn shapes_and_losses_are_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny();
        let mut store = ParamStore::<f32>::new();
        let det = Detector::new(&mut store, &mut rng, cfg.clone());
        let vol = volume(&mut rng, cfg.grid.resolution, 2);
        let mut f = Fwd::new(&store, BnMode::Train);
        let out = det.forward(&mut f, &vol, false);
        let geom = cfg.geometry();
        assert_eq!((geom.rows, geom.cols), (2, 2));
        assert_eq!(f.tape.value(out.f0).shape, [2, cfg.bev_channels(), 2, 2]);
        assert_eq!(f.tape.value(out.heads.cls).shape, [2, 1, 2, 2]);
        let gt = vec![Box3D::new(3.0, 3.0, 1.0, 4.0, 1.7, 1.5, 0.3, 0)];
        let bundles: Vec<_> = (0..2).map(|_| build_targets(&gt, 1, &geom, &det.codec())).collect();
        let samples = det.confidence_samples(&f.tape, &out, &[gt.clone(), gt.clone()], 2);
        assert!((2..=4).contains(&samples.len()));
        let l = det.losses(&mut f.tape, &out, &bundles, &samples, [1.0; 5]);
        let v = l.values(&f.tape);
        assert!(v.total.is_finite() && v.total > 0.0);
        assert!((v.cls + v.boxes + v.iou + v.sem - v.total).abs() < 1e-4 * v.total);
        let grads = f.tape.backward(l.total).unwrap();
        let w = store.id("head.cls.out.w").unwrap();
        assert!(grads.param(w).is_some());
    }

    #[test]
    fn detached_iou_branch_stops_at_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny();
        let mut store = ParamStore::<f32>::new();
        let det = Detector::new(&mut store, &mut rng, cfg.clone());
        let vol = volume(&mut rng, cfg.grid.resolution, 1);
        let gt = vec![Box3D::new(3.0, 3.0, 1.0, 4.0, 1.7, 1.5, 0.3, 0)];
        let grad_of_iou = |detach: bool, name: &str| {
            let mut f = Fwd::new(&store, BnMode::Train);
            let out = det.forward(&mut f, &vol, detach);
            let samples = det.confidence_samples(&f.tape, &out, std::slice::from_ref(&gt), 4);
            let l = iou_conf_loss(&mut f.tape, out.heads.iou, &samples);
            let g = f.tape.backward(l).unwrap();
            g.param(store.id(name).unwrap()).map_or(0.0, |t| t.sum_sq())
        };
        assert!(grad_of_iou(false, "tower.reduce.conv.w") > 0.0);
        assert_eq!(grad_of_iou(true, "tower.reduce.conv.w"), 0.0);
        assert!(grad_of_iou(true, "head.iou.out.w") > 0.0);
    }
}
