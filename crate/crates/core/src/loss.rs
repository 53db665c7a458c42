//! Cross-entropy classification loss, IoU regression loss and their weighted
//! sum, each with an analytic gradient with respect to the head outputs.
//!
//! Reductions are means over the selected cells of a single pair; batch
//! averaging happens in the training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GridSpec, Point};
use crate::labels::{Label, LabelMap, SampleSelection};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_reg: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.lambda_cls) && ok(self.lambda_reg) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and non-negative".into()))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.cls_loss.is_finite() && self.reg_loss.is_finite() && self.total.is_finite()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numeric struct")
    }

    /// Element-wise mean of several reports; counts are summed.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        LossReport {
            cls_loss: reports.iter().map(|r| r.cls_loss).sum::<f64>() / n,
            reg_loss: reports.iter().map(|r| r.reg_loss).sum::<f64>() / n,
            total: reports.iter().map(|r| r.total).sum::<f64>() / n,
            positives: reports.iter().map(|r| r.positives).sum(),
            negatives: reports.iter().map(|r| r.negatives).sum(),
        }
    }
}

fn check_selection(labels: &LabelMap, sel: &SampleSelection) -> Result<()> {
    if sel.is_empty() {
        return Err(Error::EmptySelection);
    }
    let n = labels.cells().len();
    for (list, want) in [(&sel.positives, Label::Positive), (&sel.negatives, Label::Negative)] {
        for &idx in list.iter() {
            if idx >= n || labels.cells()[idx] != want {
                return Err(Error::Shape(format!("selected cell {idx} is not a {want:?} cell")));
            }
        }
    }
    Ok(())
}

/// Softmax cross-entropy at one cell, returning the loss and the gradient
/// with respect to the (background, foreground) logits.
fn cell_ce(bg: f64, fg: f64, positive: bool) -> (f64, [f64; 2]) {
    let m = bg.max(fg);
    let lse = m + ((bg - m).exp() + (fg - m).exp()).ln();
    let (pb, pf) = ((bg - lse).exp(), (fg - lse).exp());
    if positive {
        (lse - fg, [pb, pf - 1.0])
    } else {
        (lse - bg, [pb - 1.0, pf])
    }
}

/// Mean cross-entropy over the selected cells and its gradient w.r.t. the
/// `2 x h x w` logit map.
pub fn classification_loss_grad(cls: &Tensor, labels: &LabelMap, sel: &SampleSelection) -> Result<(f64, Tensor)> {
    if cls.shape() != (2, labels.height(), labels.width()) {
        return Err(Error::Shape(format!(
            "cls map {:?} does not match {}x{} labels",
            cls.shape(),
            labels.height(),
            labels.width()
        )));
    }
    check_selection(labels, sel)?;
    let n = sel.len() as f64;
    let plane = cls.plane_len();
    let mut grad = Tensor::zeros(2, cls.height(), cls.width());
    let mut total = 0.0;
    let cells = sel.positives.iter().map(|&i| (i, true)).chain(sel.negatives.iter().map(|&i| (i, false)));
    for (idx, positive) in cells {
        let (l, g) = cell_ce(cls.data()[idx] as f64, cls.data()[plane + idx] as f64, positive);
        total += l;
        grad.data_mut()[idx] += (g[0] / n) as f32;
        grad.data_mut()[plane + idx] += (g[1] / n) as f32;
    }
    Ok((total / n, grad))
}

pub fn classification_loss(cls: &Tensor, labels: &LabelMap, sel: &SampleSelection) -> Result<f64> {
    classification_loss_grad(cls, labels, sel).map(|(l, _)| l)
}

/// `1 - IoU` between the box decoded from distances `d` (left, top, right,
/// bottom) at `p` and `gt`, with its gradient w.r.t. `d`.
pub fn cell_iou_loss(p: Point, d: [f64; 4], gt: &BBox) -> (f64, [f64; 4]) {
    let [l, t, r, b] = d;
    let (px1, py1, px2, py2) = (p.x - l, p.y - t, p.x + r, p.y + b);
    let iw_raw = px2.min(gt.x2()) - px1.max(gt.x1());
    let ih_raw = py2.min(gt.y2()) - py1.max(gt.y1());
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let area_p = (l + r) * (t + b);
    let union = area_p + gt.area() - inter;
    let iou = inter / union;

    let d_inter = -(union + inter) / (union * union);
    let d_area = inter / (union * union);
    let step = |cond: bool| if cond { 1.0 } else { 0.0 };
    let wpos = step(iw_raw > 0.0);
    let hpos = step(ih_raw > 0.0);
    let di = [
        ih * wpos * step(px1 > gt.x1()),
        iw * hpos * step(py1 > gt.y1()),
        ih * wpos * step(px2 < gt.x2()),
        iw * hpos * step(py2 < gt.y2()),
    ];
    let da = [t + b, l + r, t + b, l + r];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = d_inter * di[k] + d_area * da[k];
    }
    (1.0 - iou, grad)
}

fn distances_at(reg: &Tensor, idx: usize) -> [f64; 4] {
    let plane = reg.plane_len();
    std::array::from_fn(|k| reg.data()[k * plane + idx] as f64)
}

/// Mean `1 - IoU` over the positive cells and its gradient w.r.t. the
/// `4 x h x w` distance map.
pub fn iou_loss_grad(reg: &Tensor, gt: &BBox, positives: &[usize], spec: &GridSpec) -> Result<(f64, Tensor)> {
    if reg.shape() != (4, spec.h, spec.w) {
        return Err(Error::Shape(format!(
            "reg map {:?} does not match {}x{} grid",
            reg.shape(),
            spec.h,
            spec.w
        )));
    }
    if positives.is_empty() {
        return Err(Error::NoPositives);
    }
    let n = positives.len() as f64;
    let plane = reg.plane_len();
    let mut grad = Tensor::zeros(4, spec.h, spec.w);
    let mut total = 0.0;
    for &idx in positives {
        let p = spec.point_of_index(idx)?;
        let d = distances_at(reg, idx);
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NonPositiveDistance(d));
        }
        let (l, g) = cell_iou_loss(p, d, gt);
        total += l;
        for k in 0..4 {
            grad.data_mut()[k * plane + idx] += (g[k] / n) as f32;
        }
    }
    Ok((total / n, grad))
}

pub fn iou_loss(reg: &Tensor, gt: &BBox, positives: &[usize], spec: &GridSpec) -> Result<f64> {
    iou_loss_grad(reg, gt, positives, spec).map(|(l, _)| l)
}

/// Weighted objective plus gradients w.r.t. the `cls` and `reg` maps.
pub fn total_loss_grad(
    cls: &Tensor,
    reg: &Tensor,
    labels: &LabelMap,
    sel: &SampleSelection,
    gt: &BBox,
    spec: &GridSpec,
    cfg: &LossConfig,
) -> Result<(LossReport, Tensor, Tensor)> {
    let (cls_loss, mut dcls) = classification_loss_grad(cls, labels, sel)?;
    let (reg_loss, mut dreg) = iou_loss_grad(reg, gt, &sel.positives, spec)?;
    dcls.scale(cfg.lambda_cls as f32);
    dreg.scale(cfg.lambda_reg as f32);
    let report = LossReport {
        cls_loss,
        reg_loss,
        total: cfg.lambda_cls * cls_loss + cfg.lambda_reg * reg_loss,
        positives: sel.positives.len(),
        negatives: sel.negatives.len(),
    };
    Ok((report, dcls, dreg))
}

pub fn total_loss(
    cls: &Tensor,
    reg: &Tensor,
    labels: &LabelMap,
    sel: &SampleSelection,
    gt: &BBox,
    spec: &GridSpec,
    cfg: &LossConfig,
) -> Result<LossReport> {
    total_loss_grad(cls, reg, labels, sel, gt, spec, cfg).map(|(r, _, _)| r)
}
