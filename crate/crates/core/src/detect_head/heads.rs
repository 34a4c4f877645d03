// SPDX-License-Identifier: Apache-2.0

use rand::Rng;

use crate::autodiff::Var;
use crate::nn::{Conv, ConvBnRelu, Fwd};
use crate::ops::Conv2dSpec;
use crate::params::ParamStore;
use crate::real::Real;

/// Initial classification bias, `-ln((1 - 0.1) / 0.1)`.
pub const CLS_BIAS_INIT: f64 = -2.19;

/// 3x3 conv with norm and ReLU, then a 1x1 conv with bias.
#[derive(Clone, Debug)]
pub struct Branch {
    pub hidden: ConvBnRelu,
    pub out: Conv,
}

impl Branch {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize, hidden: usize, out: usize) -> Self {
        let p = format!("head.{name}");
        Self {
            hidden: ConvBnRelu::new(store, rng, &format!("{p}.hidden"), c, hidden, Conv2dSpec::SAME3),
            out: Conv::new(store, rng, &format!("{p}.out"), hidden, out, 1, Conv2dSpec::POINTWISE, true),
        }
    }

    fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, g: Var) -> Var {
        let h = self.hidden.forward(f, g);
        self.out.forward(f, h)
    }
}

/// Raw head outputs, each `(B, C, L, W)`. `cls` and `iou` are logits.
#[derive(Clone, Copy, Debug)]
pub struct HeadOut {
    pub cls: Var,
    pub offset: Var,
    pub z: Var,
    pub size: Var,
    pub rot_bin: Var,
    pub rot_res: Var,
    pub iou: Var,
}

/// Parallel prediction branches on the shared BEV map.
#[derive(Clone, Debug)]
pub struct HeadStack {
    pub num_classes: usize,
    pub bins: usize,
    pub cls: Branch,
    pub offset: Branch,
    pub z: Branch,
    pub size: Branch,
    pub rot_bin: Branch,
    pub rot_res: Branch,
    pub iou: Branch,
}

impl HeadStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        c: usize,
        hidden: usize,
        num_classes: usize,
        bins: usize,
        size_prior: [f64; 3],
    ) -> Self {
        let cls = Branch::new(store, rng, "cls", c, hidden, num_classes);
        if let Some(b) = cls.out.b {
            store.get_mut(b).value.data.iter_mut().for_each(|v| *v = T::lit(CLS_BIAS_INIT));
        }
        let size = Branch::new(store, rng, "size", c, hidden, 3);
        if let Some(b) = size.out.b {
            for (v, p) in store.get_mut(b).value.data.iter_mut().zip(size_prior) {
                *v = T::lit(p);
            }
        }
        Self {
            num_classes,
            bins,
            cls,
            offset: Branch::new(store, rng, "offset", c, hidden, 2),
            z: Branch::new(store, rng, "z", c, hidden, 1),
            size,
            rot_bin: Branch::new(store, rng, "rot_bin", c, hidden, bins),
            rot_res: Branch::new(store, rng, "rot_res", c, hidden, bins),
            iou: Branch::new(store, rng, "iou", c, hidden, 1),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, g: Var) -> HeadOut {
        self.forward_split(f, g, g)
    }

    /// Like [`HeadStack::forward`], with the IoU branch reading `g_iou`.
    pub fn forward_split<T: Real>(&self, f: &mut Fwd<'_, T>, g: Var, g_iou: Var) -> HeadOut {
        HeadOut {
            cls: self.cls.forward(f, g),
            offset: self.offset.forward(f, g),
            z: self.z.forward(f, g),
            size: self.size.forward(f, g),
            rot_bin: self.rot_bin.forward(f, g),
            rot_res: self.rot_res.forward(f, g),
            iou: self.iou.forward(f, g_iou),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::BnMode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_widths_and_cls_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let h = HeadStack::new(&mut store, &mut rng, 4, 8, 3, 12, [4.0, 1.7, 1.5]);
        let mut f = Fwd::new(&store, BnMode::Eval);
        let g = f.tape.constant(Tensor::zeros(&[2, 4, 5, 6]));
        let o = h.forward(&mut f, g);
        let width = |v: Var| f.tape.value(v).shape.clone();
        assert_eq!(width(o.cls), [2, 3, 5, 6]);
        assert_eq!(width(o.offset), [2, 2, 5, 6]);
        assert_eq!(width(o.z), [2, 1, 5, 6]);
        assert_eq!(width(o.size), [2, 3, 5, 6]);
        assert_eq!(width(o.rot_bin), [2, 12, 5, 6]);
        assert_eq!(width(o.rot_res), [2, 12, 5, 6]);
        assert_eq!(width(o.iou), [2, 1, 5, 6]);
        // zero input: the outputs are the biases
        assert!(f.tape.value(o.cls).data.iter().all(|&v| (v + 2.19).abs() < 1e-6));
        assert!(f.tape.value(o.size).data[..30].iter().all(|&v| (v - 4.0).abs() < 1e-6));
    }
}
