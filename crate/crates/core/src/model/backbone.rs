//! Shared-weight feature extractors. Both variants reach a total stride of 8
//! and keep every emitted level at that resolution: a 255 pixel search patch
//! yields 31x31 maps and a 127 pixel template yields 15x15 maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    Affine, Bottleneck, Conv2d, ConvSpec, Layer, LayerCache, LayerNorm, MaxPool, ParamGroup,
    Parameterized, Param, Sequential,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    L3,
    L4,
    L5,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L3, Level::L4, Level::L5];

    /// Backbone stage whose output this level taps.
    pub fn stage(self) -> usize {
        match self {
            Level::L3 => 2,
            Level::L4 => 3,
            Level::L5 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::L3 => "l3",
            Level::L4 => "l4",
            Level::L5 => "l5",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Five small conv blocks: three stride-2 blocks, then dilation 2 and 4.
    #[default]
    Tiny,
    /// ResNet-50 with conv4/conv5 at stride 1 and atrous rates 2 and 4.
    Resnet50Atrous,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub kind: BackboneKind,
    pub stages: Vec<Sequential>,
    level_channels: [usize; 3],
}

pub struct BackboneCache {
    stages: Vec<Option<Vec<LayerCache>>>,
}

fn conv_block<R: Rng + ?Sized>(
    name: &str,
    spec: ConvSpec,
    stage: usize,
    rng: &mut R,
) -> Vec<Layer> {
    let g = ParamGroup::Backbone(stage);
    vec![
        Layer::Conv(Conv2d::new(&format!("{name}.conv"), spec, g, rng)),
        Layer::Norm(LayerNorm::new(&format!("{name}.norm"), spec.out_ch, g)),
        Layer::Relu,
    ]
}

fn tiny<R: Rng + ?Sized>(width: usize, rng: &mut R) -> (Vec<Sequential>, [usize; 3]) {
    let (c1, c2) = (width, width * 2);
    let specs = [
        ConvSpec::new(3, c1, 3).stride(2),
        ConvSpec::new(c1, c2, 3).stride(2),
        ConvSpec::new(c2, c2, 3).stride(2),
        ConvSpec::new(c2, c2, 3).padding(2).dilation(2),
        ConvSpec::new(c2, c2, 3).padding(4).dilation(4),
    ];
    let stages = specs
        .iter()
        .enumerate()
        .map(|(s, spec)| Sequential::new(conv_block(&format!("backbone.conv{}", s + 1), *spec, s, rng)))
        .collect();
    (stages, [c2, c2, c2])
}

struct ResnetLayer {
    planes: usize,
    blocks: usize,
    stride: usize,
    dilation: usize,
}

fn conv_affine<R: Rng + ?Sized>(name: &str, spec: ConvSpec, g: ParamGroup, rng: &mut R) -> [Layer; 2] {
    [
        Layer::Conv(Conv2d::new(&format!("{name}.conv"), spec, g, rng)),
        Layer::Affine(Affine::new(&format!("{name}.bn"), spec.out_ch, g)),
    ]
}

fn bottleneck<R: Rng + ?Sized>(
    name: &str,
    inplanes: usize,
    planes: usize,
    stride: usize,
    dilation: usize,
    first: bool,
    g: ParamGroup,
    rng: &mut R,
) -> Bottleneck {
    let out = planes * 4;
    let needs_projection = first && (stride != 1 || inplanes != out);
    // Layer-entry blocks halve the atrous rate so the transition is gradual.
    let (mid_dilation, mid_padding) = if needs_projection && dilation > 1 {
        (dilation / 2, dilation / 2)
    } else if dilation > 1 {
        (dilation, dilation)
    } else {
        (1, 2 - stride)
    };
    let mut main = Vec::new();
    main.extend(conv_affine(&format!("{name}.a"), ConvSpec::new(inplanes, planes, 1), g, rng));
    main.push(Layer::Relu);
    main.extend(conv_affine(
        &format!("{name}.b"),
        ConvSpec::new(planes, planes, 3)
            .stride(stride)
            .padding(mid_padding)
            .dilation(mid_dilation),
        g,
        rng,
    ));
    main.push(Layer::Relu);
    main.extend(conv_affine(&format!("{name}.c"), ConvSpec::new(planes, out, 1), g, rng));
    let shortcut = needs_projection.then(|| {
        let spec = if stride == 1 && dilation == 1 {
            ConvSpec::new(inplanes, out, 1)
        } else if dilation > 1 {
            let dd = dilation / 2;
            ConvSpec::new(inplanes, out, 3).stride(stride).padding(dd).dilation(dd)
        } else {
            ConvSpec::new(inplanes, out, 3).stride(stride)
        };
        Sequential::new(conv_affine(&format!("{name}.down"), spec, g, rng).into())
    });
    Bottleneck {
        main: Sequential::new(main),
        shortcut,
    }
}

fn resnet50_atrous<R: Rng + ?Sized>(rng: &mut R) -> (Vec<Sequential>, [usize; 3]) {
    let g0 = ParamGroup::Backbone(0);
    let mut stem: Vec<Layer> = conv_affine("backbone.conv1", ConvSpec::new(3, 64, 7).stride(2), g0, rng).into();
    stem.push(Layer::Relu);
    stem.push(Layer::MaxPool(MaxPool {
        kernel: 3,
        stride: 2,
        padding: 1,
    }));
    let mut stages = vec![Sequential::new(stem)];
    let layers = [
        ResnetLayer { planes: 64, blocks: 3, stride: 1, dilation: 1 },
        ResnetLayer { planes: 128, blocks: 4, stride: 2, dilation: 1 },
        ResnetLayer { planes: 256, blocks: 6, stride: 1, dilation: 2 },
        ResnetLayer { planes: 512, blocks: 3, stride: 1, dilation: 4 },
    ];
    let mut inplanes = 64;
    for (li, layer) in layers.iter().enumerate() {
        let stage = li + 1;
        let g = ParamGroup::Backbone(stage);
        let mut blocks = Vec::with_capacity(layer.blocks);
        for b in 0..layer.blocks {
            let first = b == 0;
            let block = bottleneck(
                &format!("backbone.layer{stage}.{b}"),
                inplanes,
                layer.planes,
                if first { layer.stride } else { 1 },
                layer.dilation,
                first,
                g,
                rng,
            );
            inplanes = layer.planes * 4;
            blocks.push(Layer::Bottleneck(Box::new(block)));
        }
        stages.push(Sequential::new(blocks));
    }
    (stages, [512, 1024, 2048])
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(kind: BackboneKind, tiny_width: usize, rng: &mut R) -> Self {
        let (stages, level_channels) = match kind {
            BackboneKind::Tiny => tiny(tiny_width, rng),
            BackboneKind::Resnet50Atrous => resnet50_atrous(rng),
        };
        Self {
            kind,
            stages,
            level_channels,
        }
    }

    pub fn channels(&self, level: Level) -> usize {
        self.level_channels[level as usize]
    }

    fn last_stage(levels: &[Level]) -> usize {
        levels.iter().map(|l| l.stage()).max().unwrap_or(0)
    }

    /// Features at each requested level, in the order given.
    pub fn forward(&self, x: &Tensor, levels: &[Level]) -> Vec<Tensor> {
        let mut cur = x.clone();
        let mut taps = vec![None; 5];
        for (s, stage) in self.stages.iter().enumerate().take(Self::last_stage(levels) + 1) {
            cur = stage.forward(&cur);
            if levels.iter().any(|l| l.stage() == s) {
                taps[s] = Some(cur.clone());
            }
        }
        levels.iter().map(|l| taps[l.stage()].clone().expect("tapped")).collect()
    }

    /// Like [`forward`](Self::forward) but keeps activations for stages at or
    /// after `first_trainable`.
    pub fn forward_train(&self, x: &Tensor, levels: &[Level], first_trainable: usize) -> (Vec<Tensor>, BackboneCache) {
        let last = Self::last_stage(levels);
        let mut cur = x.clone();
        let mut taps = vec![None; 5];
        let mut caches = Vec::with_capacity(last + 1);
        for (s, stage) in self.stages.iter().enumerate().take(last + 1) {
            if s >= first_trainable {
                let (y, c) = stage.forward_train(&cur);
                cur = y;
                caches.push(Some(c));
            } else {
                cur = stage.forward(&cur);
                caches.push(None);
            }
            if levels.iter().any(|l| l.stage() == s) {
                taps[s] = Some(cur.clone());
            }
        }
        let outs = levels.iter().map(|l| taps[l.stage()].clone().expect("tapped")).collect();
        (outs, BackboneCache { stages: caches })
    }

    /// Accumulates parameter gradients for stages `first_trainable..`.
    pub fn backward(&mut self, cache: &BackboneCache, levels: &[Level], level_grads: Vec<Tensor>, first_trainable: usize) {
        let last = Self::last_stage(levels);
        let mut per_stage: Vec<Option<Tensor>> = vec![None; 5];
        for (l, g) in levels.iter().zip(level_grads) {
            per_stage[l.stage()] = Some(g);
        }
        let mut g: Option<Tensor> = None;
        for s in (first_trainable..=last).rev() {
            if let Some(extra) = per_stage[s].take() {
                g = Some(match g {
                    Some(mut acc) => {
                        acc.add_assign(&extra);
                        acc
                    }
                    None => extra,
                });
            }
            let Some(grad) = g.take() else { continue };
            let stage_cache = cache.stages[s].as_ref().expect("stage cached");
            g = self.stages[s].backward(stage_cache, grad, s > first_trainable);
        }
    }
}

impl Parameterized for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.stages.iter().for_each(|s| s.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stages.iter_mut().for_each(|s| s.visit_mut(f));
    }
}
