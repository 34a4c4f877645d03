// SPDX-License-Identifier: Apache-2.0

use rand::Rng;

use super::deform::DeformConvLayer;
use crate::autodiff::Var;
use crate::nn::{BatchNorm, Conv, ConvBnRelu, Fwd};
use crate::ops::{self, Conv2dSpec};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const LEVEL_STRIDES: [usize; 3] = [1, 2, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TowerConfig {
    pub in_ch: usize,
    pub level_ch: usize,
    pub n_lvl: usize,
    pub out_ch: usize,
}

/// One downsampling level and the upsampling branch that brings its output
/// back to the input resolution.
#[derive(Clone, Debug)]
pub struct Level {
    pub down: ConvBnRelu,
    pub convs: Vec<ConvBnRelu>,
    pub deform: DeformConvLayer,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub up_bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct DeformTower {
    pub cfg: TowerConfig,
    pub levels: Vec<Level>,
    pub reduce: ConvBnRelu,
    pub out: DeformConvLayer,
}

impl DeformTower {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: TowerConfig) -> Self {
        let mut levels = Vec::new();
        let mut prev = cfg.in_ch;
        let mut scale = 1;
        for (i, &s) in LEVEL_STRIDES.iter().enumerate() {
            scale *= s;
            let p = format!("tower.level{}", i + 1);
            let spec = Conv2dSpec { stride: s, pad: 1 };
            let down = ConvBnRelu::new(store, rng, &format!("{p}.down"), prev, cfg.level_ch, spec);
            let convs = (0..cfg.n_lvl)
                .map(|j| ConvBnRelu::new(store, rng, &format!("{p}.conv{}", j + 1), cfg.level_ch, cfg.level_ch, Conv2dSpec::SAME3))
                .collect();
            let deform = DeformConvLayer::new(store, rng, &format!("{p}.deform"), cfg.level_ch, cfg.level_ch);
            let up_w = store.add_kaiming(
                format!("{p}.up.w"),
                &[cfg.level_ch, cfg.level_ch, scale, scale],
                cfg.level_ch,
                rng,
            );
            let up_b = store.add(format!("{p}.up.b"), Tensor::zeros(&[cfg.level_ch]), true);
            let up_bn = BatchNorm::new(store, &format!("{p}.up.bn"), cfg.level_ch);
            levels.push(Level { down, convs, deform, up_w, up_b, up_bn });
            prev = cfg.level_ch;
        }
        let reduce = ConvBnRelu::new(store, rng, "tower.reduce", 3 * cfg.level_ch, cfg.out_ch, Conv2dSpec::SAME3);
        let out = DeformConvLayer::new(store, rng, "tower.out", cfg.out_ch, cfg.out_ch);
        Self { cfg, levels, reduce, out }
    }

    /// `(B, in_ch, L, W)` to `(B, out_ch, L, W)`.
    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Var {
        let target = {
            let v = f.tape.value(x);
            (v.dim(2), v.dim(3))
        };
        let mut h = x;
        let mut taps = Vec::with_capacity(self.levels.len());
        for lvl in &self.levels {
            h = lvl.down.forward(f, h);
            for c in &lvl.convs {
                h = c.forward(f, h);
            }
            h = lvl.deform.forward(f, h);
            let (w, b) = (f.param(lvl.up_w), f.param(lvl.up_b));
            let up = ops::conv_transpose2d(&mut f.tape, h, w, b, target);
            let up = lvl.up_bn.forward(f, up);
            taps.push(ops::relu(&mut f.tape, up));
        }
        let cat = ops::concat_channels(&mut f.tape, &taps);
        let y = self.reduce.forward(f, cat);
        self.out.forward(f, y)
    }
}

/// `phi_s`: 3x3 conv with norm and ReLU, then a 1x1 conv to one logit map.
#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub conv: ConvBnRelu,
    pub out: Conv,
}

impl AttentionHead {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, c: usize, hidden: usize) -> Self {
        Self {
            conv: ConvBnRelu::new(store, rng, "attention.conv", c, hidden, Conv2dSpec::SAME3),
            out: Conv::new(store, rng, "attention.out", hidden, 1, 1, Conv2dSpec::POINTWISE, true),
        }
    }

    /// Logits `(B, 1, L, W)`.
    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Var {
        let h = self.conv.forward(f, x);
        self.out.forward(f, h)
    }
}
