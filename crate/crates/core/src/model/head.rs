//! Box adaptive head: classification and regression branches, each with its
//! own adjustment of template and search features, a depth-wise correlation
//! and a small tower. Regression outputs pass through `exp` so every side
//! distance is strictly positive.

use rand::Rng;

use super::xcorr::{depthwise_xcorr, depthwise_xcorr_backward};
use crate::error::Result;
use crate::nn::{Conv2d, ConvSpec, Layer, LayerCache, LayerNorm, ParamGroup, Parameterized, Param, Sequential};
use crate::tensor::Tensor;

/// Per-level (or fused) head output, channel-major: `cls` is `2 x h x w`
/// logits (background, foreground) and `reg` is `4 x h x w` side distances
/// (left, top, right, bottom) in search-patch pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub cls: Tensor,
    pub reg: Tensor,
}

#[derive(Clone, Debug)]
struct Branch {
    adjust_z: Sequential,
    adjust_x: Sequential,
    tower: Sequential,
}

struct BranchCache {
    z: Vec<LayerCache>,
    x: Vec<LayerCache>,
    zk: Tensor,
    xs: Tensor,
    tower: Vec<LayerCache>,
}

impl Branch {
    fn new<R: Rng + ?Sized>(name: &str, channels: usize, out: usize, out_bias: f32, rng: &mut R) -> Self {
        let g = ParamGroup::Head;
        let adjust = |side: &str, rng: &mut R| {
            Sequential::new(vec![
                Layer::Conv(Conv2d::new(&format!("{name}.adjust_{side}"), ConvSpec::new(channels, channels, 1), g, rng)),
                Layer::Norm(LayerNorm::new(&format!("{name}.adjust_{side}.norm"), channels, g)),
            ])
        };
        let adjust_z = adjust("z", rng);
        let adjust_x = adjust("x", rng);
        let mut last = Conv2d::with_std(
            &format!("{name}.tower.out"),
            ConvSpec::new(channels, out, 1).with_bias(),
            g,
            0.01,
            rng,
        );
        if let Some(b) = &mut last.bias {
            b.value.iter_mut().for_each(|v| *v = out_bias);
        }
        let tower = Sequential::new(vec![
            Layer::Conv(Conv2d::new(
                &format!("{name}.tower.conv"),
                ConvSpec::new(channels, channels, 3).padding(1),
                g,
                rng,
            )),
            Layer::Norm(LayerNorm::new(&format!("{name}.tower.norm"), channels, g)),
            Layer::Relu,
            Layer::Conv(last),
        ]);
        Self {
            adjust_z,
            adjust_x,
            tower,
        }
    }

    fn forward(&self, z: &Tensor, x: &Tensor) -> Result<Tensor> {
        let zk = self.adjust_z.forward(z);
        let xs = self.adjust_x.forward(x);
        let corr = depthwise_xcorr(&xs, &zk)?;
        Ok(self.tower.forward(&corr))
    }

    fn forward_train(&self, z: &Tensor, x: &Tensor) -> Result<(Tensor, BranchCache)> {
        let (zk, zc) = self.adjust_z.forward_train(z);
        let (xs, xc) = self.adjust_x.forward_train(x);
        let corr = depthwise_xcorr(&xs, &zk)?;
        let (out, tc) = self.tower.forward_train(&corr);
        Ok((
            out,
            BranchCache {
                z: zc,
                x: xc,
                zk,
                xs,
                tower: tc,
            },
        ))
    }

    fn backward(&mut self, cache: &BranchCache, grad: Tensor) -> (Tensor, Tensor) {
        let dcorr = self.tower.backward(&cache.tower, grad, true).expect("input grad");
        let (dxs, dzk) = depthwise_xcorr_backward(&cache.xs, &cache.zk, &dcorr);
        let dz = self.adjust_z.backward(&cache.z, dzk, true).expect("input grad");
        let dx = self.adjust_x.backward(&cache.x, dxs, true).expect("input grad");
        (dz, dx)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.adjust_z.visit(f);
        self.adjust_x.visit(f);
        self.tower.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.adjust_z.visit_mut(f);
        self.adjust_x.visit_mut(f);
        self.tower.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct BoxHead {
    cls: Branch,
    reg: Branch,
}

pub struct HeadCache {
    cls: BranchCache,
    reg: BranchCache,
    out_reg: Tensor,
}

impl BoxHead {
    /// `reg_init` is the side distance (pixels) predicted before training.
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, reg_init: f32, rng: &mut R) -> Self {
        Self {
            cls: Branch::new(&format!("{name}.cls"), channels, 2, 0.0, rng),
            reg: Branch::new(&format!("{name}.reg"), channels, 4, reg_init.ln(), rng),
        }
    }

    pub fn forward(&self, z: &Tensor, x: &Tensor) -> Result<HeadOutput> {
        let cls = self.cls.forward(z, x)?;
        let mut reg = self.reg.forward(z, x)?;
        reg.map_inplace(f32::exp);
        Ok(HeadOutput { cls, reg })
    }

    pub fn forward_train(&self, z: &Tensor, x: &Tensor) -> Result<(HeadOutput, HeadCache)> {
        let (cls, cc) = self.cls.forward_train(z, x)?;
        let (mut reg, rc) = self.reg.forward_train(z, x)?;
        reg.map_inplace(f32::exp);
        let cache = HeadCache {
            cls: cc,
            reg: rc,
            out_reg: reg.clone(),
        };
        Ok((HeadOutput { cls, reg }, cache))
    }

    /// Returns gradients with respect to the template and search features.
    pub fn backward(&mut self, cache: &HeadCache, dcls: Tensor, mut dreg: Tensor) -> (Tensor, Tensor) {
        for (g, &y) in dreg.data_mut().iter_mut().zip(cache.out_reg.data()) {
            *g *= y;
        }
        let (mut dz, mut dx) = self.cls.backward(&cache.cls, dcls);
        let (dz2, dx2) = self.reg.backward(&cache.reg, dreg);
        dz.add_assign(&dz2);
        dx.add_assign(&dx2);
        (dz, dx)
    }
}

impl Parameterized for BoxHead {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.cls.visit(f);
        self.reg.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.cls.visit_mut(f);
        self.reg.visit_mut(f);
    }
}
