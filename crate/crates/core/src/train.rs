//! Two-phase SGD training: heads only first, then the unfrozen backbone
//! stages join at a reduced learning rate.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_pair, CropSpec, PairSample, SequenceRecord};
use crate::error::{Error, Result};
use crate::labels::{assign, sample_training_points, AssignmentConfig, MAX_NEGATIVES, MAX_POSITIVES};
use crate::loss::{total_loss_grad, LossConfig, LossReport};
use crate::model::checkpoint::{Checkpoint, NamedArray};
use crate::model::{BackboneKind, SiameseModel, TrainScope};
use crate::nn::{ParamGroup, Parameterized};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(alias = "batch")]
    pub batch_size: usize,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    /// Overrides `epochs * pairs_per_epoch / batch_size` when set.
    pub steps: Option<usize>,
    /// Share of the schedule spent in linear warmup.
    pub warmup_fraction: f64,
    /// Share of the schedule that trains the heads only.
    pub head_only_fraction: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub backbone_lr_mult: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
    /// Leading backbone stages that never train. `None` freezes two stages
    /// of ResNet-50 and one block of the tiny backbone.
    pub frozen_stages: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 2,
            pairs_per_epoch: 800,
            steps: None,
            warmup_fraction: 0.25,
            head_only_fraction: 0.5,
            lr_start: 0.001,
            lr_peak: 0.005,
            lr_end: 0.00005,
            momentum: 0.9,
            weight_decay: 0.0001,
            backbone_lr_mult: 0.1,
            grad_clip: 10.0,
            frozen_stages: None,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * self.pairs_per_epoch / self.batch_size.max(1))
    }

    /// Step count of the linear warmup; at least two so both endpoints are
    /// hit exactly.
    pub fn warmup_steps(&self) -> usize {
        let n = self.total_steps();
        ((n as f64 * self.warmup_fraction).round() as usize).clamp(2.min(n), n.saturating_sub(1).max(1))
    }

    pub fn head_only_steps(&self) -> usize {
        (self.total_steps() as f64 * self.head_only_fraction).round() as usize
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.total_steps().div_ceil(self.epochs.max(1)).max(1)
    }

    pub fn frozen_stages_for(&self, kind: BackboneKind) -> usize {
        self.frozen_stages.unwrap_or(match kind {
            BackboneKind::Tiny => 1,
            BackboneKind::Resnet50Atrous => 2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("train.batch_size and train.epochs must be positive");
        }
        if self.total_steps() < 3 {
            return bad("training schedule needs at least 3 steps");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.head_only_fraction) {
            return bad("train fractions must lie in [0, 1)");
        }
        let lrs = [self.lr_start, self.lr_peak, self.lr_end];
        if lrs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("learning rates must be finite and non-negative");
        }
        if (self.lr_end == 0.0) != (self.lr_peak == 0.0) {
            return bad("lr_peak and lr_end must both be zero or both positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.backbone_lr_mult < 0.0 || self.grad_clip < 0.0 {
            return bad("momentum, weight decay, lr multiplier or clip out of range");
        }
        Ok(())
    }
}

/// Linear warmup from `lr_start` to `lr_peak` over the warmup steps, then
/// per-step exponential decay that reaches `lr_end` at the final step.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let n = cfg.total_steps();
    let w = cfg.warmup_steps();
    let last = n.saturating_sub(1);
    let step = step.min(last);
    if step < w {
        let t = step as f64 / (w - 1).max(1) as f64;
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * t;
    }
    if cfg.lr_peak == 0.0 {
        return 0.0;
    }
    let span = (last - (w - 1)).max(1) as f64;
    let t = (step - (w - 1)) as f64 / span;
    cfg.lr_peak * (cfg.lr_end / cfg.lr_peak).powf(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Heads,
    FineTune,
}

/// SGD with momentum and L2 weight decay applied to the gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    /// Momentum buffers in parameter visit order; empty until the first
    /// update touches a parameter.
    pub buffers: Vec<Vec<f32>>,
}

/// Learning rate for one parameter group, or `None` when it must not move.
fn group_lr(group: ParamGroup, lr: f64, scope: TrainScope, mult: f64) -> Option<f64> {
    match group {
        ParamGroup::Head => Some(lr),
        ParamGroup::Backbone(s) if scope.backbone && s >= scope.first_trainable_stage => Some(lr * mult),
        ParamGroup::Backbone(_) => None,
    }
}

impl Sgd {
    /// Applies one update and returns the pre-clip global gradient norm.
    pub fn step(&mut self, model: &mut SiameseModel, lr: f64, scope: TrainScope, cfg: &TrainConfig) -> f64 {
        let mut sq = 0.0f64;
        model.visit(&mut |p| {
            if group_lr(p.group, lr, scope, cfg.backbone_lr_mult).is_some() {
                sq += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
            }
        });
        let norm = sq.sqrt();
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            (cfg.grad_clip / norm) as f32
        } else {
            1.0
        };
        let (mu, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
        let mut idx = 0;
        let buffers = &mut self.buffers;
        model.visit_mut(&mut |p| {
            let k = idx;
            idx += 1;
            if buffers.len() <= k {
                buffers.resize(k + 1, Vec::new());
            }
            let Some(plr) = group_lr(p.group, lr, scope, cfg.backbone_lr_mult) else {
                return;
            };
            let buf = &mut buffers[k];
            if buf.len() != p.value.len() {
                *buf = vec![0.0; p.value.len()];
            }
            let plr = plr as f32;
            for ((v, &g), b) in p.value.iter_mut().zip(&p.grad).zip(buf.iter_mut()) {
                let d = g * clip + wd * *v;
                *b = mu * *b + d;
                *v -= plr * *b;
            }
        });
        norm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

impl StepLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub final_checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
}

/// Training state that persists across steps and checkpoints.
pub struct Trainer {
    pub model: SiameseModel,
    pub optimizer: Sgd,
    pub step: usize,
    pub cfg: TrainConfig,
    pub labels: AssignmentConfig,
    pub loss: LossConfig,
    pub crop: CropSpec,
    rng: ChaCha8Rng,
}

/// Forward, loss and backward over a batch, then one optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut SiameseModel,
    optimizer: &mut Sgd,
    batch: &[PairSample],
    lr: f64,
    scope: TrainScope,
    cfg: &TrainConfig,
    label_cfg: &AssignmentConfig,
    loss_cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<(LossReport, f64)> {
    model.zero_grad();
    let spec = model.grid_spec();
    let mut reports = Vec::with_capacity(batch.len());
    let mut usable = Vec::with_capacity(batch.len());
    let mut selections = Vec::with_capacity(batch.len());
    for pair in batch {
        let labels = assign(&pair.gt, &spec, label_cfg);
        match sample_training_points(&labels, MAX_POSITIVES, MAX_NEGATIVES, rng) {
            Ok(sel) => {
                usable.push(pair);
                selections.push((labels, sel));
            }
            Err(Error::NoPositives) => continue,
            Err(e) => return Err(e),
        }
    }
    if usable.is_empty() {
        return Err(Error::NoPositives);
    }
    let inv_b = 1.0 / usable.len() as f32;
    for (pair, (labels, sel)) in usable.iter().zip(&selections) {
        let report = model.train_pair(&pair.template, &pair.search, scope, |out| {
            let (r, mut dc, mut dr) = total_loss_grad(&out.cls, &out.reg, labels, sel, &pair.gt, &spec, loss_cfg)?;
            dc.scale(inv_b);
            dr.scale(inv_b);
            Ok((r, dc, dr))
        })?;
        reports.push(report);
    }
    let report = LossReport::mean(&reports);
    if !report.is_finite() {
        let detail = usable
            .iter()
            .map(|p| format!("{}[{}->{}] gt={}", p.sequence, p.template_frame, p.search_frame, p.gt))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("{report:?} batch: {detail}"),
        });
    }
    let norm = optimizer.step(model, lr, scope, cfg);
    Ok((report, norm))
}

impl Trainer {
    pub fn new(
        model: SiameseModel,
        cfg: TrainConfig,
        labels: AssignmentConfig,
        loss: LossConfig,
        crop: CropSpec,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        crop.validate()?;
        Ok(Self {
            model,
            optimizer: Sgd::default(),
            step: 0,
            cfg,
            labels,
            loss,
            crop,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn phase_at(&self, step: usize) -> Phase {
        if step < self.cfg.head_only_steps() {
            Phase::Heads
        } else {
            Phase::FineTune
        }
    }

    pub fn scope_at(&self, step: usize) -> TrainScope {
        match self.phase_at(step) {
            Phase::Heads => TrainScope::heads_only(),
            Phase::FineTune => TrainScope {
                backbone: true,
                first_trainable_stage: self.cfg.frozen_stages_for(self.model.config().backbone),
            },
        }
    }

    /// Runs one optimizer step on `batch`.
    pub fn step_on(&mut self, batch: &[PairSample]) -> Result<StepLog> {
        let step = self.step;
        let lr = lr_at(step, &self.cfg);
        let scope = self.scope_at(step);
        let (loss, grad_norm) = train_step(
            &mut self.model,
            &mut self.optimizer,
            batch,
            lr,
            scope,
            &self.cfg,
            &self.labels,
            &self.loss,
            &mut self.rng,
            step,
        )?;
        self.step += 1;
        Ok(StepLog {
            step,
            epoch: step / self.cfg.steps_per_epoch(),
            phase: self.phase_at(step),
            lr,
            grad_norm,
            loss,
        })
    }

    /// Trains until the schedule ends, sampling batches from `dataset`.
    /// With `out_dir`, writes a checkpoint after every epoch and a final one.
    pub fn run(
        &mut self,
        dataset: &[SequenceRecord],
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<TrainReport> {
        let start = Instant::now();
        let total = self.cfg.total_steps();
        let per_epoch = self.cfg.steps_per_epoch();
        let mut logs = Vec::with_capacity(total.saturating_sub(self.step));
        let mut final_checkpoint = None;
        while self.step < total {
            let batch = (0..self.cfg.batch_size)
                .map(|_| sample_pair(dataset, &mut self.rng, &self.crop))
                .collect::<Result<Vec<_>>>()?;
            let log = self.step_on(&batch)?;
            on_step(&log);
            logs.push(log);
            let done = self.step;
            if let Some(dir) = out_dir {
                if done % per_epoch == 0 || done == total {
                    let name = if done == total {
                        "final.safetensors".to_string()
                    } else {
                        format!("epoch_{:03}.safetensors", done / per_epoch)
                    };
                    let path = dir.join(name);
                    self.checkpoint().save(&path)?;
                    final_checkpoint = Some(path);
                }
            }
        }
        Ok(TrainReport {
            steps: logs,
            final_checkpoint,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Parameters, momentum buffers and enough state to continue exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        let mut idx = 0;
        self.model.visit(&mut |p| {
            if let Some(buf) = self.optimizer.buffers.get(idx).filter(|b| !b.is_empty()) {
                ck.arrays.insert(
                    format!("optim.momentum.{}", p.name),
                    NamedArray {
                        shape: p.shape.clone(),
                        data: buf.clone(),
                    },
                );
            }
            idx += 1;
        });
        ck.extra.insert("step".into(), serde_json::json!(self.step));
        ck.extra.insert("train".into(), serde_json::to_value(&self.cfg).expect("serializable"));
        ck.extra.insert("labels".into(), serde_json::to_value(self.labels).expect("serializable"));
        ck.extra.insert("loss".into(), serde_json::to_value(self.loss).expect("serializable"));
        ck.extra.insert("crop".into(), serde_json::to_value(self.crop).expect("serializable"));
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        ck.extra.insert("rng_seed".into(), serde_json::json!(seed));
        ck.extra.insert("rng_word_pos".into(), serde_json::json!(self.rng.get_word_pos().to_string()));
        ck
    }

    /// Restores a trainer saved with [`checkpoint`](Self::checkpoint).
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let parse = |k: &str| -> Result<serde_json::Value> {
            ck.extra
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing training field {k:?}")))
        };
        let cfg: TrainConfig = serde_json::from_value(parse("train")?)?;
        let labels: AssignmentConfig = serde_json::from_value(parse("labels")?)?;
        let loss: LossConfig = serde_json::from_value(parse("loss")?)?;
        let crop: CropSpec = serde_json::from_value(parse("crop")?)?;
        let step: usize = serde_json::from_value(parse("step")?)?;
        let seed_hex: String = serde_json::from_value(parse("rng_seed")?)?;
        let pos: String = serde_json::from_value(parse("rng_word_pos")?)?;
        let mut seed = [0u8; 32];
        if seed_hex.len() != 64 {
            return Err(Error::Checkpoint("bad rng seed".into()));
        }
        for (k, s) in seed.iter_mut().enumerate() {
            *s = u8::from_str_radix(&seed_hex[2 * k..2 * k + 2], 16)
                .map_err(|_| Error::Checkpoint("bad rng seed".into()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos.parse().map_err(|_| Error::Checkpoint("bad rng position".into()))?);

        let model = ck.to_model()?;
        let mut buffers = Vec::new();
        model.visit(&mut |p| {
            buffers.push(
                ck.arrays
                    .get(&format!("optim.momentum.{}", p.name))
                    .map(|a| a.data.clone())
                    .unwrap_or_default(),
            );
        });
        let mut t = Self::new(model, cfg, labels, loss, crop, 0)?;
        t.optimizer = Sgd { buffers };
        t.step = step;
        t.rng = rng;
        Ok(t)
    }
}
