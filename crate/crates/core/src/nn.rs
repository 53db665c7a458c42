//! Minimal single-sample layers with explicit backward passes.
//!
//! Forward passes borrow parameters immutably; `*_train` variants also return
//! the activations their backward pass needs. Gradients accumulate into
//! [`Param::grad`] until the optimizer clears them.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Backbone stage index, counted from the input.
    Backbone(usize),
    Head,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub group: ParamGroup,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>, group: ParamGroup) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; n],
            group,
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: f32, group: ParamGroup) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n], group)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameters.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));
}

fn gaussian<R: Rng + ?Sized>(n: usize, std: f32, rng: &mut R) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// `C = A * B (+ C when accumulate)` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n - 1) * csb + 1 || k == 0);
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D convolution with square kernels, stride, zero padding and dilation.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f32>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: false,
        }
    }
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }
    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }
    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }
    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

impl Conv2d {
    /// He-normal initialised convolution.
    pub fn new<R: Rng + ?Sized>(name: &str, spec: ConvSpec, group: ParamGroup, rng: &mut R) -> Self {
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        let std = (2.0 / fan_in as f32).sqrt();
        Self::with_std(name, spec, group, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        name: &str,
        spec: ConvSpec,
        group: ParamGroup,
        std: f32,
        rng: &mut R,
    ) -> Self {
        let k = spec.kernel;
        let n = spec.out_ch * spec.in_ch * k * k;
        let weight = Param::new(
            format!("{name}.weight"),
            vec![spec.out_ch, spec.in_ch, k, k],
            gaussian(n, std, rng),
            group,
        );
        let bias = spec
            .bias
            .then(|| Param::filled(format!("{name}.bias"), vec![spec.out_ch], 0.0, group));
        Self {
            weight,
            bias,
            in_ch: spec.in_ch,
            out_ch: spec.out_ch,
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let f = |n: usize| (n + 2 * self.padding).saturating_sub(span) / self.stride + 1;
        (f(h), f(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &Tensor, out_h: usize, out_w: usize) -> Vec<f32> {
        let (c, h, w) = x.shape();
        let k = self.kernel;
        let n = out_h * out_w;
        let mut cols = vec![0.0f32; c * k * k * n];
        let (s, p, d) = (self.stride as isize, self.padding as isize, self.dilation as isize);
        for ci in 0..c {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * n;
                    let off_x = kx as isize * d - p;
                    // valid output columns: 0 <= ox*s + off_x < w
                    let ox_lo = if off_x >= 0 { 0 } else { ((-off_x) + s - 1) / s };
                    let ox_hi = if (w as isize) > off_x {
                        ((w as isize - off_x - 1) / s + 1).min(out_w as isize)
                    } else {
                        0
                    };
                    for oy in 0..out_h {
                        let iy = oy as isize * s + ky as isize * d - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut cols[row + oy * out_w..row + (oy + 1) * out_w];
                        if s == 1 {
                            if ox_lo < ox_hi {
                                let a = (ox_lo + off_x) as usize;
                                let len = (ox_hi - ox_lo) as usize;
                                dst[ox_lo as usize..ox_hi as usize].copy_from_slice(&src[a..a + len]);
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox as usize] = src[(ox * s + off_x) as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Tensor {
        let k = self.kernel;
        let n = out_h * out_w;
        let mut x = Tensor::zeros(c, h, w);
        let (s, p, d) = (self.stride as isize, self.padding as isize, self.dilation as isize);
        for ci in 0..c {
            let plane = x.plane_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * n;
                    let off_x = kx as isize * d - p;
                    let ox_lo = if off_x >= 0 { 0 } else { ((-off_x) + s - 1) / s };
                    let ox_hi = if (w as isize) > off_x {
                        ((w as isize - off_x - 1) / s + 1).min(out_w as isize)
                    } else {
                        0
                    };
                    for oy in 0..out_h {
                        let iy = oy as isize * s + ky as isize * d - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * out_w..row + (oy + 1) * out_w];
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in ox_lo..ox_hi {
                            dst[(ox * s + off_x) as usize] += src[ox as usize];
                        }
                    }
                }
            }
        }
        x
    }

    fn apply(&self, x: &Tensor, cols: &[f32], out_h: usize, out_w: usize) -> Tensor {
        let n = out_h * out_w;
        let kdim = x.channels() * self.kernel * self.kernel;
        let mut out = Tensor::zeros(self.out_ch, out_h, out_w);
        gemm(
            self.out_ch,
            kdim,
            n,
            &self.weight.value,
            (kdim, 1),
            cols,
            (n, 1),
            out.data_mut(),
            false,
        );
        if let Some(b) = &self.bias {
            for (o, &bv) in b.value.iter().enumerate() {
                out.plane_mut(o).iter_mut().for_each(|v| *v += bv);
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.in_ch, "{}: channel mismatch", self.weight.name);
        let (oh, ow) = self.out_size(x.height(), x.width());
        if self.is_pointwise() {
            return self.apply(x, x.data(), oh, ow);
        }
        let cols = self.im2col(x, oh, ow);
        self.apply(x, &cols, oh, ow)
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.channels(), self.in_ch, "{}: channel mismatch", self.weight.name);
        let (oh, ow) = self.out_size(x.height(), x.width());
        let cols = if self.is_pointwise() {
            x.data().to_vec()
        } else {
            self.im2col(x, oh, ow)
        };
        let out = self.apply(x, &cols, oh, ow);
        let cache = ConvCache {
            cols,
            in_h: x.height(),
            in_w: x.width(),
            out_h: oh,
            out_w: ow,
        };
        (out, cache)
    }

    pub fn backward(&mut self, cache: &ConvCache, grad: &Tensor, need_input: bool) -> Option<Tensor> {
        let n = cache.out_h * cache.out_w;
        let kdim = self.in_ch * self.kernel * self.kernel;
        // dW += g * cols^T
        gemm(
            self.out_ch,
            n,
            kdim,
            grad.data(),
            (n, 1),
            &cache.cols,
            (1, n),
            &mut self.weight.grad,
            true,
        );
        if let Some(b) = &mut self.bias {
            for (o, gb) in b.grad.iter_mut().enumerate() {
                *gb += grad.plane(o).iter().sum::<f32>();
            }
        }
        if !need_input {
            return None;
        }
        // dcols = W^T * g
        let mut dcols = vec![0.0f32; kdim * n];
        gemm(
            kdim,
            self.out_ch,
            n,
            &self.weight.value,
            (1, kdim),
            grad.data(),
            (n, 1),
            &mut dcols,
            false,
        );
        if self.is_pointwise() {
            return Some(Tensor::from_vec(self.in_ch, cache.in_h, cache.in_w, dcols).expect("shape"));
        }
        Some(self.col2im(&dcols, self.in_ch, cache.in_h, cache.in_w, cache.out_h, cache.out_w))
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Per-sample normalization over all of `C x H x W` followed by a
/// per-channel affine transform (group normalization with a single group).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f32,
}

#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Tensor,
    inv_std: f32,
}

impl LayerNorm {
    pub fn new(name: &str, channels: usize, group: ParamGroup) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0, group),
            beta: Param::filled(format!("{name}.beta"), vec![channels], 0.0, group),
            eps: 1e-5,
        }
    }

    fn normalize(&self, x: &Tensor) -> (Tensor, f32) {
        let n = x.data().len() as f64;
        let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x
            .data()
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv_std = (1.0 / (var + self.eps as f64).sqrt()) as f32;
        let mean = mean as f32;
        let mut xhat = x.clone();
        xhat.map_inplace(|v| (v - mean) * inv_std);
        (xhat, inv_std)
    }

    fn affine(&self, xhat: &Tensor) -> Tensor {
        let mut out = xhat.clone();
        for c in 0..out.channels() {
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            out.plane_mut(c).iter_mut().for_each(|v| *v = *v * g + b);
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.affine(&self.normalize(x).0)
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, NormCache) {
        let (xhat, inv_std) = self.normalize(x);
        let out = self.affine(&xhat);
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache, grad: &Tensor, need_input: bool) -> Option<Tensor> {
        let xhat = &cache.xhat;
        let mut dxhat = grad.clone();
        for c in 0..grad.channels() {
            let (gp, xp) = (grad.plane(c), xhat.plane(c));
            let mut dg = 0.0f32;
            let mut db = 0.0f32;
            for (&g, &xh) in gp.iter().zip(xp) {
                dg += g * xh;
                db += g;
            }
            self.gamma.grad[c] += dg;
            self.beta.grad[c] += db;
            let gamma = self.gamma.value[c];
            dxhat.plane_mut(c).iter_mut().for_each(|v| *v *= gamma);
        }
        if !need_input {
            return None;
        }
        let n = dxhat.data().len() as f64;
        let mean_d = dxhat.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let mean_dx = dxhat
            .data()
            .iter()
            .zip(xhat.data())
            .map(|(&d, &x)| d as f64 * x as f64)
            .sum::<f64>()
            / n;
        let (mean_d, mean_dx) = (mean_d as f32, mean_dx as f32);
        let inv = cache.inv_std;
        for (d, &x) in dxhat.data_mut().iter_mut().zip(xhat.data()) {
            *d = inv * (*d - mean_d - x * mean_dx);
        }
        Some(dxhat)
    }
}

impl Parameterized for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Per-channel scale and shift: a batch norm folded to its inference form.
#[derive(Clone, Debug)]
pub struct Affine {
    pub scale: Param,
    pub shift: Param,
}

impl Affine {
    pub fn new(name: &str, channels: usize, group: ParamGroup) -> Self {
        Self {
            scale: Param::filled(format!("{name}.scale"), vec![channels], 1.0, group),
            shift: Param::filled(format!("{name}.shift"), vec![channels], 0.0, group),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for c in 0..out.channels() {
            let (a, b) = (self.scale.value[c], self.shift.value[c]);
            out.plane_mut(c).iter_mut().for_each(|v| *v = *v * a + b);
        }
        out
    }

    pub fn backward(&mut self, input: &Tensor, grad: &Tensor, need_input: bool) -> Option<Tensor> {
        for c in 0..grad.channels() {
            let (gp, xp) = (grad.plane(c), input.plane(c));
            self.scale.grad[c] += gp.iter().zip(xp).map(|(g, x)| g * x).sum::<f32>();
            self.shift.grad[c] += gp.iter().sum::<f32>();
        }
        need_input.then(|| {
            let mut dx = grad.clone();
            for c in 0..dx.channels() {
                let a = self.scale.value[c];
                dx.plane_mut(c).iter_mut().for_each(|v| *v *= a);
            }
            dx
        })
    }
}

impl Parameterized for Affine {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.scale);
        f(&self.shift);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.scale);
        f(&mut self.shift);
    }
}

/// 3x3 / stride 2 / padding 1 max pooling, the ResNet stem pool.
#[derive(Clone, Copy, Debug)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool {
    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Returns the pooled tensor and the flat input index of every maximum.
    pub fn forward_indexed(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let (c, h, w) = x.shape();
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut out = Tensor::zeros(c, oh, ow);
        let mut arg = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (ci * h + iy as usize) * w + ix as usize;
                            let v = x.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    *out.at_mut(ci, oy, ox) = best;
                    arg.push(best_idx);
                }
            }
        }
        (out, arg)
    }

    pub fn backward(&self, arg: &[usize], in_shape: (usize, usize, usize), grad: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(in_shape.0, in_shape.1, in_shape.2);
        for (&idx, &g) in arg.iter().zip(grad.data()) {
            dx.data_mut()[idx] += g;
        }
        dx
    }
}

pub fn relu(x: &mut Tensor) {
    x.map_inplace(|v| v.max(0.0));
}

/// Backward through ReLU given its output.
pub fn relu_backward(out: &Tensor, grad: &mut Tensor) {
    for (g, &y) in grad.data_mut().iter_mut().zip(out.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// One entry of a [`Sequential`] stack.
#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    Norm(LayerNorm),
    Affine(Affine),
    Relu,
    MaxPool(MaxPool),
    Bottleneck(Box<Bottleneck>),
}

#[derive(Clone, Debug)]
pub enum LayerCache {
    Conv(ConvCache),
    Norm(NormCache),
    /// Input of an affine layer.
    Affine(Tensor),
    /// Output of a ReLU.
    Relu(Tensor),
    Pool(Vec<usize>, (usize, usize, usize)),
    Bottleneck(Box<BottleneckCache>),
}

impl Layer {
    pub fn forward(&self, x: Tensor) -> Tensor {
        match self {
            Layer::Conv(c) => c.forward(&x),
            Layer::Norm(n) => n.forward(&x),
            Layer::Affine(a) => a.forward(&x),
            Layer::Relu => {
                let mut x = x;
                relu(&mut x);
                x
            }
            Layer::MaxPool(p) => p.forward_indexed(&x).0,
            Layer::Bottleneck(b) => b.forward(&x),
        }
    }

    pub fn forward_train(&self, x: Tensor) -> (Tensor, LayerCache) {
        match self {
            Layer::Conv(c) => {
                let (y, cache) = c.forward_train(&x);
                (y, LayerCache::Conv(cache))
            }
            Layer::Norm(n) => {
                let (y, cache) = n.forward_train(&x);
                (y, LayerCache::Norm(cache))
            }
            Layer::Affine(a) => (a.forward(&x), LayerCache::Affine(x)),
            Layer::Relu => {
                let mut y = x;
                relu(&mut y);
                (y.clone(), LayerCache::Relu(y))
            }
            Layer::MaxPool(p) => {
                let shape = x.shape();
                let (y, arg) = p.forward_indexed(&x);
                (y, LayerCache::Pool(arg, shape))
            }
            Layer::Bottleneck(b) => {
                let (y, cache) = b.forward_train(&x);
                (y, LayerCache::Bottleneck(Box::new(cache)))
            }
        }
    }

    pub fn backward(&mut self, cache: &LayerCache, grad: Tensor, need_input: bool) -> Option<Tensor> {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv(k)) => c.backward(k, &grad, need_input),
            (Layer::Norm(n), LayerCache::Norm(k)) => n.backward(k, &grad, need_input),
            (Layer::Affine(a), LayerCache::Affine(input)) => a.backward(input, &grad, need_input),
            (Layer::Relu, LayerCache::Relu(out)) => {
                let mut g = grad;
                relu_backward(out, &mut g);
                Some(g)
            }
            (Layer::MaxPool(p), LayerCache::Pool(arg, shape)) => Some(p.backward(arg, *shape, &grad)),
            (Layer::Bottleneck(b), LayerCache::Bottleneck(k)) => b.backward(k, grad, need_input),
            _ => panic!("layer/cache mismatch"),
        }
    }
}

impl Parameterized for Layer {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Layer::Conv(c) => c.visit(f),
            Layer::Norm(n) => n.visit(f),
            Layer::Affine(a) => a.visit(f),
            Layer::Bottleneck(b) => b.visit(f),
            Layer::Relu | Layer::MaxPool(_) => {}
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Layer::Conv(c) => c.visit_mut(f),
            Layer::Norm(n) => n.visit_mut(f),
            Layer::Affine(a) => a.visit_mut(f),
            Layer::Bottleneck(b) => b.visit_mut(f),
            Layer::Relu | Layer::MaxPool(_) => {}
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.layers.iter().fold(x.clone(), |acc, l| l.forward(acc))
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, Vec<LayerCache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            let (y, c) = l.forward_train(cur);
            caches.push(c);
            cur = y;
        }
        (cur, caches)
    }

    pub fn backward(&mut self, caches: &[LayerCache], grad: Tensor, need_input: bool) -> Option<Tensor> {
        let mut g = grad;
        let last = self.layers.len();
        for (idx, (layer, cache)) in self.layers.iter_mut().zip(caches).enumerate().rev() {
            let need = need_input || idx > 0;
            match layer.backward(cache, g, need) {
                Some(next) => g = next,
                None => {
                    debug_assert!(idx == 0 && last > 0);
                    return None;
                }
            }
        }
        Some(g)
    }
}

impl Parameterized for Sequential {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// ResNet bottleneck: 1x1 reduce, 3x3 (possibly strided or dilated), 1x1
/// expand, plus an identity or projected shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub main: Sequential,
    pub shortcut: Option<Sequential>,
}

#[derive(Clone, Debug)]
pub struct BottleneckCache {
    main: Vec<LayerCache>,
    shortcut: Option<Vec<LayerCache>>,
    out: Tensor,
}

impl Bottleneck {
    fn sum_relu(mut a: Tensor, b: &Tensor) -> Tensor {
        a.add_assign(b);
        relu(&mut a);
        a
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let main = self.main.forward(x);
        match &self.shortcut {
            Some(s) => Self::sum_relu(main, &s.forward(x)),
            None => Self::sum_relu(main, x),
        }
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, BottleneckCache) {
        let (main, mc) = self.main.forward_train(x);
        let (out, sc) = match &self.shortcut {
            Some(s) => {
                let (short, sc) = s.forward_train(x);
                (Self::sum_relu(main, &short), Some(sc))
            }
            None => (Self::sum_relu(main, x), None),
        };
        let cache = BottleneckCache {
            main: mc,
            shortcut: sc,
            out: out.clone(),
        };
        (out, cache)
    }

    pub fn backward(&mut self, cache: &BottleneckCache, grad: Tensor, need_input: bool) -> Option<Tensor> {
        let mut g = grad;
        relu_backward(&cache.out, &mut g);
        let dmain = self.main.backward(&cache.main, g.clone(), need_input);
        let dshort = match (&mut self.shortcut, &cache.shortcut) {
            (Some(s), Some(sc)) => s.backward(sc, g, need_input),
            _ => need_input.then_some(g),
        };
        match (dmain, dshort) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }
}

impl Parameterized for Bottleneck {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.main.visit(f);
        if let Some(s) = &self.shortcut {
            s.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.main.visit_mut(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(f);
        }
    }
}
