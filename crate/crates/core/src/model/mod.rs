//! Siamese feature extractor, per-level box adaptive heads and their fusion.

mod backbone;
pub mod checkpoint;
mod head;
pub mod xcorr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneKind, Level};
pub use head::{BoxHead, HeadOutput};
pub use xcorr::{depthwise_xcorr, depthwise_xcorr_backward};

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::nn::{Conv2d, ConvSpec, Layer, LayerNorm, Param, ParamGroup, Parameterized, Sequential};
use crate::tensor::Tensor;

pub const TEMPLATE_SIZE: usize = 127;
pub const SEARCH_SIZE: usize = 255;
pub const TOTAL_STRIDE: usize = 8;
/// Spatial size of the template kernel after the center crop.
pub const KERNEL_SIZE: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub levels: Vec<Level>,
    /// Channels after the 1x1 reduction. `None` picks the variant default:
    /// 256 for ResNet-50, 32 for the tiny backbone.
    pub reduced_channels: Option<usize>,
    /// Channel width of the first tiny-backbone block (later blocks double it).
    pub tiny_width: usize,
    /// Side distance in pixels predicted by an untrained regression branch.
    pub reg_init: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Tiny,
            levels: Level::ALL.to_vec(),
            reduced_channels: None,
            tiny_width: 16,
            reg_init: 32.0,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.reduced_channels.unwrap_or(match self.backbone {
            BackboneKind::Tiny => 32,
            BackboneKind::Resnet50Atrous => 256,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("model.levels must name at least one level".into()));
        }
        let mut sorted = self.levels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.levels.len() {
            return Err(Error::Config("model.levels contains duplicates".into()));
        }
        if self.channels() == 0 || self.tiny_width == 0 {
            return Err(Error::Config("model channel counts must be positive".into()));
        }
        if !(self.reg_init.is_finite() && self.reg_init > 0.0) {
            return Err(Error::Config("model.reg_init must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Template,
    Search,
}

impl Role {
    pub fn patch_size(self) -> usize {
        match self {
            Role::Template => TEMPLATE_SIZE,
            Role::Search => SEARCH_SIZE,
        }
    }
}

/// Reduced features per emitted level, in `levels` order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLevelFeatures {
    pub levels: Vec<Level>,
    pub maps: Vec<Tensor>,
}

impl MultiLevelFeatures {
    pub fn get(&self, level: Level) -> Result<&Tensor> {
        self.levels
            .iter()
            .position(|&l| l == level)
            .map(|k| &self.maps[k])
            .ok_or(Error::UnknownLevel(level as usize + 3))
    }
}

/// Learnable fusion logits; a softmax turns each set into convex weights.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub cls: Param,
    pub reg: Param,
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl FusionWeights {
    pub fn uniform(n: usize) -> Self {
        Self {
            cls: Param::filled("fusion.cls", vec![n], 0.0, ParamGroup::Head),
            reg: Param::filled("fusion.reg", vec![n], 0.0, ParamGroup::Head),
        }
    }

    /// `(alpha, beta)` after normalization; each sums to one.
    pub fn normalized(&self) -> (Vec<f32>, Vec<f32>) {
        (softmax(&self.cls.value), softmax(&self.reg.value))
    }
}

impl Parameterized for FusionWeights {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.cls);
        f(&self.reg);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.cls);
        f(&mut self.reg);
    }
}

fn weighted_sum(maps: &[&Tensor], w: &[f32]) -> Tensor {
    let mut out = Tensor::zeros(maps[0].channels(), maps[0].height(), maps[0].width());
    for (m, &wk) in maps.iter().zip(w) {
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += wk * v;
        }
    }
    out
}

/// Convex combination of per-level outputs.
pub fn fuse_levels(outputs: &[HeadOutput], weights: &FusionWeights) -> Result<HeadOutput> {
    if outputs.is_empty() {
        return Err(Error::Shape("cannot fuse an empty level set".into()));
    }
    if weights.cls.value.len() != outputs.len() || weights.reg.value.len() != outputs.len() {
        return Err(Error::Shape(format!(
            "{} fusion weights for {} levels",
            weights.cls.value.len(),
            outputs.len()
        )));
    }
    let first = &outputs[0];
    if outputs
        .iter()
        .any(|o| !o.cls.same_shape(&first.cls) || !o.reg.same_shape(&first.reg))
    {
        return Err(Error::Shape("levels disagree on map size".into()));
    }
    let (alpha, beta) = weights.normalized();
    let cls: Vec<&Tensor> = outputs.iter().map(|o| &o.cls).collect();
    let reg: Vec<&Tensor> = outputs.iter().map(|o| &o.reg).collect();
    Ok(HeadOutput {
        cls: weighted_sum(&cls, &alpha),
        reg: weighted_sum(&reg, &beta),
    })
}

fn dot(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Gradient of fusion w.r.t. each level's maps; accumulates logit grads.
fn fuse_backward(outputs: &[HeadOutput], weights: &mut FusionWeights, dcls: &Tensor, dreg: &Tensor) -> Vec<(Tensor, Tensor)> {
    let (alpha, beta) = weights.normalized();
    let mut level_grads = Vec::with_capacity(outputs.len());
    for (k, _) in outputs.iter().enumerate() {
        let mut gc = dcls.clone();
        gc.scale(alpha[k]);
        let mut gr = dreg.clone();
        gr.scale(beta[k]);
        level_grads.push((gc, gr));
    }
    let dalpha: Vec<f32> = outputs.iter().map(|o| dot(dcls, &o.cls)).collect();
    let dbeta: Vec<f32> = outputs.iter().map(|o| dot(dreg, &o.reg)).collect();
    let softmax_back = |w: &[f32], dw: &[f32], grad: &mut [f32]| {
        let mean: f32 = w.iter().zip(dw).map(|(a, b)| a * b).sum();
        for ((g, &wk), &dk) in grad.iter_mut().zip(w).zip(dw) {
            *g += wk * (dk - mean);
        }
    };
    softmax_back(&alpha, &dalpha, &mut weights.cls.grad);
    softmax_back(&beta, &dbeta, &mut weights.reg.grad);
    level_grads
}

/// Which parts of the network receive gradients in a training pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainScope {
    pub backbone: bool,
    /// Backbone stages before this index stay frozen.
    pub first_trainable_stage: usize,
}

impl TrainScope {
    pub fn heads_only() -> Self {
        Self {
            backbone: false,
            first_trainable_stage: usize::MAX,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SiameseModel {
    config: ModelConfig,
    backbone: Backbone,
    necks: Vec<Sequential>,
    heads: Vec<BoxHead>,
    fusion: FusionWeights,
}

/// Maps raw `[0, 255]` pixels to roughly unit scale.
fn normalize_pixels(patch: &Tensor) -> Tensor {
    let mut x = patch.clone();
    x.map_inplace(|v| (v - 127.5) / 64.0);
    x
}

fn center_crop(t: &Tensor) -> Result<(Tensor, usize)> {
    let size = t.height();
    if size < KERNEL_SIZE || t.width() != size {
        return Err(Error::Shape(format!(
            "template features {}x{} smaller than the {KERNEL_SIZE}x{KERNEL_SIZE} kernel",
            t.height(),
            t.width()
        )));
    }
    let start = (size - KERNEL_SIZE) / 2;
    Ok((t.crop(start, start, KERNEL_SIZE, KERNEL_SIZE)?, start))
}

impl SiameseModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.backbone, config.tiny_width, &mut rng);
        let ch = config.channels();
        let necks = config
            .levels
            .iter()
            .map(|&l| {
                let name = format!("neck.{}", l.name());
                Sequential::new(vec![
                    Layer::Conv(Conv2d::new(
                        &format!("{name}.conv"),
                        ConvSpec::new(backbone.channels(l), ch, 1),
                        ParamGroup::Head,
                        &mut rng,
                    )),
                    Layer::Norm(LayerNorm::new(&format!("{name}.norm"), ch, ParamGroup::Head)),
                ])
            })
            .collect();
        let heads = config
            .levels
            .iter()
            .map(|l| BoxHead::new(&format!("head.{}", l.name()), ch, config.reg_init, &mut rng))
            .collect();
        let fusion = FusionWeights::uniform(config.levels.len());
        Ok(Self {
            config,
            backbone,
            necks,
            heads,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn levels(&self) -> &[Level] {
        &self.config.levels
    }

    /// Geometry of the fused maps for the canonical patch sizes.
    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::canonical()
    }

    pub fn fusion(&self) -> &FusionWeights {
        &self.fusion
    }

    pub fn fusion_mut(&mut self) -> &mut FusionWeights {
        &mut self.fusion
    }

    fn level_index(&self, level: Level) -> Result<usize> {
        self.config
            .levels
            .iter()
            .position(|&l| l == level)
            .ok_or(Error::UnknownLevel(level as usize + 3))
    }

    pub fn head_mut(&mut self, level: Level) -> Result<&mut BoxHead> {
        let k = self.level_index(level)?;
        Ok(&mut self.heads[k])
    }

    /// Shared backbone and reduction path for a patch of any size, before the
    /// role-specific template crop.
    pub fn shared_features(&self, patch: &Tensor) -> Result<MultiLevelFeatures> {
        if patch.channels() != 3 {
            return Err(Error::Shape(format!("expected 3-channel patch, got {}", patch.channels())));
        }
        let feats = self.backbone.forward(&normalize_pixels(patch), &self.config.levels);
        let maps = feats.iter().zip(&self.necks).map(|(f, n)| n.forward(f)).collect();
        Ok(MultiLevelFeatures {
            levels: self.config.levels.clone(),
            maps,
        })
    }

    /// Template features are center-cropped to 7x7; search features keep
    /// their full extent.
    pub fn extract_features(&self, patch: &Tensor, role: Role) -> Result<MultiLevelFeatures> {
        let size = role.patch_size();
        if patch.shape() != (3, size, size) {
            return Err(Error::Shape(format!(
                "{role:?} patch must be 3x{size}x{size}, got {:?}",
                patch.shape()
            )));
        }
        let mut feats = self.shared_features(patch)?;
        if role == Role::Template {
            for m in feats.maps.iter_mut() {
                *m = center_crop(m)?.0;
            }
        }
        Ok(feats)
    }

    pub fn head_forward(&self, tmpl: &MultiLevelFeatures, srch: &MultiLevelFeatures, level: Level) -> Result<HeadOutput> {
        let k = self.level_index(level)?;
        self.heads[k].forward(tmpl.get(level)?, srch.get(level)?)
    }

    /// Every level's head output followed by the fused output.
    pub fn predict_levels(&self, tmpl: &MultiLevelFeatures, srch: &MultiLevelFeatures) -> Result<(Vec<HeadOutput>, HeadOutput)> {
        let outs = self
            .config
            .levels
            .iter()
            .map(|&l| self.head_forward(tmpl, srch, l))
            .collect::<Result<Vec<_>>>()?;
        let fused = fuse_levels(&outs, &self.fusion)?;
        Ok((outs, fused))
    }

    /// Fused prediction for a search patch given cached template features.
    pub fn predict(&self, tmpl: &MultiLevelFeatures, search_patch: &Tensor) -> Result<HeadOutput> {
        let srch = self.extract_features(search_patch, Role::Search)?;
        Ok(self.predict_levels(tmpl, &srch)?.1)
    }

    /// One forward and backward pass over a training pair. `loss` receives
    /// the fused output and returns its report plus gradients w.r.t. the
    /// fused `cls` and `reg` maps; parameter gradients accumulate in place.
    pub fn train_pair<T, F>(&mut self, template: &Tensor, search: &Tensor, scope: TrainScope, loss: F) -> Result<T>
    where
        F: FnOnce(&HeadOutput) -> Result<(T, Tensor, Tensor)>,
    {
        for (patch, role) in [(template, Role::Template), (search, Role::Search)] {
            let size = role.patch_size();
            if patch.shape() != (3, size, size) {
                return Err(Error::Shape(format!("{role:?} patch must be 3x{size}x{size}")));
            }
        }
        let levels = self.config.levels.clone();
        let first = if scope.backbone {
            scope.first_trainable_stage
        } else {
            usize::MAX
        };
        let z_in = normalize_pixels(template);
        let x_in = normalize_pixels(search);
        let (zf, zcache) = self.backbone.forward_train(&z_in, &levels, first);
        let (xf, xcache) = self.backbone.forward_train(&x_in, &levels, first);

        let mut neck_caches = Vec::with_capacity(levels.len());
        let mut head_caches = Vec::with_capacity(levels.len());
        let mut outputs = Vec::with_capacity(levels.len());
        let mut crop_geom = Vec::with_capacity(levels.len());
        for k in 0..levels.len() {
            let (zn, zc) = self.necks[k].forward_train(&zf[k]);
            let (xn, xc) = self.necks[k].forward_train(&xf[k]);
            let (zk, start) = center_crop(&zn)?;
            crop_geom.push((zn.height(), zn.width(), start));
            let (out, hc) = self.heads[k].forward_train(&zk, &xn)?;
            neck_caches.push((zc, xc));
            head_caches.push(hc);
            outputs.push(out);
        }
        let fused = fuse_levels(&outputs, &self.fusion)?;
        let (report, dcls, dreg) = loss(&fused)?;
        let level_grads = fuse_backward(&outputs, &mut self.fusion, &dcls, &dreg);

        let mut dz_feats = Vec::with_capacity(levels.len());
        let mut dx_feats = Vec::with_capacity(levels.len());
        for (k, (gc, gr)) in level_grads.into_iter().enumerate() {
            let (dz, dx) = self.heads[k].backward(&head_caches[k], gc, gr);
            let (h, w, start) = crop_geom[k];
            let dz_full = dz.uncrop(h, w, start, start);
            let (zc, xc) = &neck_caches[k];
            let dzf = self.necks[k].backward(zc, dz_full, scope.backbone);
            let dxf = self.necks[k].backward(xc, dx, scope.backbone);
            if let (Some(a), Some(b)) = (dzf, dxf) {
                dz_feats.push(a);
                dx_feats.push(b);
            }
        }
        if scope.backbone && first < self.backbone.stages.len() {
            self.backbone.backward(&zcache, &levels, dz_feats, first);
            self.backbone.backward(&xcache, &levels, dx_feats, first);
        }
        Ok(report)
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }
}

impl Parameterized for SiameseModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.backbone.visit(f);
        self.necks.iter().for_each(|n| n.visit(f));
        self.heads.iter().for_each(|h| h.visit(f));
        self.fusion.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_mut(f);
        self.necks.iter_mut().for_each(|n| n.visit_mut(f));
        self.heads.iter_mut().for_each(|h| h.visit_mut(f));
        self.fusion.visit_mut(f);
    }
}
