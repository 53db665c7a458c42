//! One-pass evaluation: success and precision curves, per-attribute
//! breakdowns, and the label-assignment ablation.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, RunConfig, SeedStream};
use crate::data::{make_synthetic_sequence, SequenceRecord};
use crate::error::{Error, Result};
use crate::geometry::{center_error, iou, BBox};
use crate::labels::LabelVariant;
use crate::model::SiameseModel;
use crate::track::Tracker;
use crate::train::{TrainReport, Trainer};

/// Success thresholds are `k / SUCCESS_STEPS` for `k = 0..=SUCCESS_STEPS`.
pub const SUCCESS_STEPS: usize = 20;
/// Precision thresholds are `0..=PRECISION_MAX` pixels.
pub const PRECISION_MAX: usize = 50;
pub const PRECISION_AT: usize = 20;

pub fn success_thresholds() -> Vec<f64> {
    (0..=SUCCESS_STEPS).map(|k| k as f64 / SUCCESS_STEPS as f64).collect()
}

/// Fraction of frames with IoU at or above each threshold.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    let n = ious.len().max(1) as f64;
    success_thresholds()
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v >= t).count() as f64 / n)
        .collect()
}

/// Fraction of frames whose center error is within each pixel threshold.
pub fn precision_curve(errors: &[f64]) -> Vec<f64> {
    let n = errors.len().max(1) as f64;
    (0..=PRECISION_MAX)
        .map(|d| errors.iter().filter(|&&e| e <= d as f64).count() as f64 / n)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub precision20: f64,
    pub success: Vec<f64>,
    pub precision: Vec<f64>,
    pub per_frame_iou: Vec<f64>,
    pub per_frame_center_error: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalResult {
    pub fn success_at(&self, threshold: f64) -> f64 {
        let n = self.per_frame_iou.len().max(1) as f64;
        self.per_frame_iou.iter().filter(|&&v| v >= threshold).count() as f64 / n
    }

    fn failed(msg: String, attributes: Vec<String>) -> Self {
        Self {
            auc: 0.0,
            precision20: 0.0,
            success: vec![0.0; SUCCESS_STEPS + 1],
            precision: vec![0.0; PRECISION_MAX + 1],
            per_frame_iou: Vec::new(),
            per_frame_center_error: Vec::new(),
            attributes,
            error: Some(msg),
        }
    }
}

/// Curves and scores for aligned prediction and ground-truth lists.
pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<EvalResult> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let errors: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| center_error(p, g)).collect();
    let success = success_curve(&ious);
    let precision = precision_curve(&errors);
    Ok(EvalResult {
        auc: success.iter().sum::<f64>() / success.len() as f64,
        precision20: precision[PRECISION_AT],
        success,
        precision,
        per_frame_iou: ious,
        per_frame_center_error: errors,
        attributes: Vec::new(),
        error: None,
    })
}

/// Anything that can follow a target given its first-frame box.
pub trait SequenceTracker {
    fn init(&mut self, frame: &RgbImage, bbox: &BBox) -> Result<()>;
    fn track(&mut self, frame: &RgbImage, index: usize) -> Result<BBox>;
}

impl SequenceTracker for Tracker<'_> {
    fn init(&mut self, frame: &RgbImage, bbox: &BBox) -> Result<()> {
        Tracker::init(self, frame, bbox)
    }
    fn track(&mut self, frame: &RgbImage, _index: usize) -> Result<BBox> {
        Ok(self.track_frame(frame)?.bbox)
    }
}

/// Replays known boxes; scores a perfect tracker.
pub struct OracleTracker {
    pub boxes: Vec<BBox>,
}

impl SequenceTracker for OracleTracker {
    fn init(&mut self, _frame: &RgbImage, _bbox: &BBox) -> Result<()> {
        Ok(())
    }
    fn track(&mut self, _frame: &RgbImage, index: usize) -> Result<BBox> {
        self.boxes.get(index).copied().ok_or(Error::Uninitialized)
    }
}

/// Initializes on the first ground-truth box and tracks every later frame.
/// The first prediction is the initialization box.
pub fn run_sequence(tracker: &mut dyn SequenceTracker, seq: &SequenceRecord) -> Result<Vec<BBox>> {
    let first = *seq.boxes.first().ok_or_else(|| Error::Sequence {
        path: seq.name.clone().into(),
        msg: "no frames".into(),
    })?;
    let frame = seq.frame(0)?;
    tracker.init(&frame, &first)?;
    let mut out = Vec::with_capacity(seq.len());
    out.push(first);
    for i in 1..seq.len() {
        let frame = seq.frame(i)?;
        out.push(tracker.track(&frame, i)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    pub auc: f64,
    pub precision20: f64,
    pub sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallResult {
    pub auc: f64,
    pub precision20: f64,
    pub sequences: usize,
    pub failed: Vec<String>,
    pub by_attribute: BTreeMap<String, AttributeScore>,
}

/// Results JSON: one entry per sequence plus an `overall` entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    #[serde(flatten)]
    pub sequences: BTreeMap<String, EvalResult>,
    pub overall: OverallResult,
}

impl BenchmarkResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }
}

fn mean_scores<'a>(results: impl Iterator<Item = &'a EvalResult>) -> (f64, f64, usize) {
    let (mut auc, mut p20, mut n) = (0.0, 0.0, 0usize);
    for r in results {
        auc += r.auc;
        p20 += r.precision20;
        n += 1;
    }
    let d = n.max(1) as f64;
    (auc / d, p20 / d, n)
}

/// Tracks every sequence with a fresh tracker from `make`. Failing
/// sequences are recorded with zero scores and the run continues. With
/// `out_dir`, writes `results.json` and `boxes/<sequence>.txt`.
pub fn run_benchmark<T, F>(mut make: F, sequences: &[SequenceRecord], out_dir: Option<&Path>) -> Result<BenchmarkResult>
where
    T: SequenceTracker,
    F: FnMut(&SequenceRecord) -> Result<T>,
{
    let mut results = BTreeMap::new();
    let mut predictions = BTreeMap::new();
    for seq in sequences {
        if seq.name == "overall" {
            return Err(Error::Config("a sequence may not be named \"overall\"".into()));
        }
        if results.contains_key(&seq.name) {
            return Err(Error::Config(format!("duplicate sequence name {:?}", seq.name)));
        }
        let outcome = make(seq).and_then(|mut t| run_sequence(&mut t, seq)).and_then(|pred| {
            let mut r = success_auc(&pred, &seq.boxes)?;
            r.attributes = seq.attributes.clone();
            Ok((r, pred))
        });
        let r = match outcome {
            Ok((r, pred)) => {
                predictions.insert(seq.name.clone(), pred);
                r
            }
            Err(e) => EvalResult::failed(e.to_string(), seq.attributes.clone()),
        };
        results.insert(seq.name.clone(), r);
    }

    let (auc, precision20, n) = mean_scores(results.values());
    let mut tags: Vec<&String> = results.values().flat_map(|r| &r.attributes).collect();
    tags.sort();
    tags.dedup();
    let by_attribute = tags
        .into_iter()
        .map(|tag| {
            let (auc, precision20, sequences) = mean_scores(results.values().filter(|r| r.attributes.contains(tag)));
            (tag.clone(), AttributeScore { auc, precision20, sequences })
        })
        .collect();
    let failed = results
        .iter()
        .filter(|(_, r)| r.error.is_some())
        .map(|(k, _)| k.clone())
        .collect();
    let bench = BenchmarkResult {
        sequences: results,
        overall: OverallResult {
            auc,
            precision20,
            sequences: n,
            failed,
            by_attribute,
        },
    };

    if let Some(dir) = out_dir {
        let boxes_dir = dir.join("boxes");
        std::fs::create_dir_all(&boxes_dir)?;
        for (name, pred) in &predictions {
            let text: String = pred.iter().map(|b| b.to_xywh_line() + "\n").collect();
            std::fs::write(boxes_dir.join(format!("{name}.txt")), text)?;
        }
        std::fs::write(dir.join("results.json"), bench.to_json())?;
    }
    Ok(bench)
}

/// Evaluates a trained model with the run's post-processing settings.
pub fn evaluate_model(model: &SiameseModel, cfg: &RunConfig, sequences: &[SequenceRecord], out_dir: Option<&Path>) -> Result<BenchmarkResult> {
    run_benchmark(|_| Tracker::new(model, cfg.postprocess, cfg.crop), sequences, out_dir)
}

/// Synthetic training and evaluation sets for a run, each from its own
/// seed stream.
pub fn synthetic_sets(cfg: &RunConfig) -> Result<(Vec<SequenceRecord>, Vec<SequenceRecord>)> {
    let s = &cfg.synthetic;
    let build = |stream, count, len, prefix: &str| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream));
        (0..count)
            .map(|i| make_synthetic_sequence(&format!("{prefix}{i:03}"), len, &s.motion, &mut rng))
            .collect::<Result<Vec<_>>>()
    };
    Ok((
        build(SeedStream::TrainData, s.train_sequences, s.train_length, "train")?,
        build(SeedStream::EvalData, s.eval_sequences, s.eval_length, "synth")?,
    ))
}

/// Fresh model and trainer for a run configuration.
pub fn new_trainer(cfg: &RunConfig) -> Result<Trainer> {
    cfg.validate()?;
    let model = SiameseModel::new(cfg.model.clone(), derive_seed(cfg.seed, SeedStream::ModelInit))?;
    Trainer::new(
        model,
        cfg.train.clone(),
        cfg.labels,
        cfg.loss,
        cfg.crop,
        derive_seed(cfg.seed, SeedStream::Training),
    )
}

/// Trains from scratch and evaluates; deterministic for a given config.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    train_data: &[SequenceRecord],
    eval_data: &[SequenceRecord],
) -> Result<(BenchmarkResult, TrainReport, Trainer)> {
    let mut trainer = new_trainer(cfg)?;
    let report = trainer.run(train_data, None, |_| {})?;
    let bench = evaluate_model(&trainer.model, cfg, eval_data, None)?;
    Ok((bench, report, trainer))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub auc: f64,
    pub precision20: f64,
    pub final_loss: f64,
}

/// One row per label variant, keyed by variant name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: BTreeMap<String, AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10} {:>8} {:>12} {:>10}\n", "variant", "auc", "precision20", "loss");
        for (k, r) in &self.rows {
            s.push_str(&format!("{k:<10} {:>8.4} {:>12.4} {:>10.4}\n", r.auc, r.precision20, r.final_loss));
        }
        s
    }
}

/// Trains one model per variant under the same seed and budget and
/// evaluates each on the same sequences.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[LabelVariant],
    train_data: &[SequenceRecord],
    eval_data: &[SequenceRecord],
) -> Result<AblationTable> {
    let mut rows = BTreeMap::new();
    for &v in variants {
        let mut cfg = base.clone();
        cfg.labels.variant = v;
        let (bench, report, _) = train_and_evaluate(&cfg, train_data, eval_data)?;
        let final_loss = report.steps.last().map_or(f64::NAN, |s| s.loss.total);
        rows.insert(
            v.name().to_string(),
            AblationRow {
                auc: bench.overall.auc,
                precision20: bench.overall.precision20,
                final_loss,
            },
        );
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MotionSpec;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn hand_case() {
        let gt = [bx(0.0, 0.0, 10.0, 10.0), bx(0.0, 0.0, 10.0, 10.0)];
        // Second prediction covers half of the gt with nothing outside.
        let pred = [gt[0], bx(0.0, 0.0, 10.0, 5.0)];
        let r = success_auc(&pred, &gt).unwrap();
        assert_eq!(r.per_frame_iou, vec![1.0, 0.5]);
        assert_eq!(r.success_at(0.45), 1.0);
        assert_eq!(r.success_at(0.55), 0.5);
        // Thresholds 0..=0.5 (11 of them) pass both frames, 0.55..=1.0 (10)
        // pass one.
        assert!((r.auc - (11.0 + 10.0 * 0.5) / 21.0).abs() < 1e-12);
        assert_eq!(r.success.len(), 21);
        assert_eq!(r.precision.len(), 51);
    }

    #[test]
    fn perfect_and_disjoint() {
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0); 4];
        assert!((success_auc(&gt, &gt).unwrap().auc - 1.0).abs() < 1e-12);
        let far = vec![bx(100.0, 100.0, 110.0, 110.0); 4];
        let r = success_auc(&far, &gt).unwrap();
        assert!((r.auc - 1.0 / 21.0).abs() < 1e-12);
        assert_eq!(r.precision20, 0.0);
        assert!(matches!(success_auc(&far[..3], &gt), Err(Error::LengthMismatch(3, 4))));
    }

    #[test]
    fn curves_are_monotone() {
        let ious = [0.0, 0.1, 0.33, 0.5, 0.77, 0.95, 1.0];
        let s = success_curve(&ious);
        assert!(s.windows(2).all(|w| w[1] <= w[0]));
        let p = precision_curve(&[0.0, 3.5, 19.9, 20.0, 44.0, 80.0]);
        assert!(p.windows(2).all(|w| w[1] >= w[0]));
        assert!(s.iter().chain(&p).all(|v| (0.0..=1.0).contains(v)));
    }

    fn tiny_set() -> Vec<SequenceRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..3)
            .map(|i| make_synthetic_sequence(&format!("q{i}"), 5, &MotionSpec::default(), &mut rng).unwrap())
            .collect()
    }

    #[test]
    fn oracle_benchmark_scores_one() {
        let seqs = tiny_set();
        let dir = tempfile::tempdir().unwrap();
        let bench = run_benchmark(
            |s| Ok(OracleTracker { boxes: s.boxes.clone() }),
            &seqs,
            Some(dir.path()),
        )
        .unwrap();
        assert!((bench.overall.auc - 1.0).abs() < 1e-12);
        assert_eq!(bench.overall.sequences, 3);
        assert!(bench.overall.by_attribute.contains_key("background_clutter"));
        let text = std::fs::read_to_string(dir.path().join("results.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["overall"]["auc"].is_number());
        assert_eq!(v["q1"]["per_frame_iou"].as_array().unwrap().len(), 5);
        let lines = std::fs::read_to_string(dir.path().join("boxes/q0.txt")).unwrap();
        assert_eq!(lines.lines().count(), 5);
        let back: BenchmarkResult = serde_json::from_str(&text).unwrap();
        assert_eq!(back, bench);
    }

    #[test]
    fn failures_are_recorded_and_names_checked() {
        let mut seqs = tiny_set();
        let bench = run_benchmark(
            |s| {
                if s.name == "q1" {
                    Err(Error::Uninitialized)
                } else {
                    Ok(OracleTracker { boxes: s.boxes.clone() })
                }
            },
            &seqs,
            None,
        )
        .unwrap();
        assert_eq!(bench.overall.failed, vec!["q1".to_string()]);
        assert!(bench.sequences["q1"].error.is_some());
        assert!((bench.overall.auc - 2.0 / 3.0).abs() < 1e-12);

        seqs[0].name = "overall".into();
        assert!(run_benchmark(|s| Ok(OracleTracker { boxes: s.boxes.clone() }), &seqs, None).is_err());
    }

    #[test]
    fn ablation_structure() {
        let mut cfg = RunConfig::default();
        cfg.model.tiny_width = 4;
        cfg.model.reduced_channels = Some(8);
        cfg.train.steps = Some(3);
        cfg.train.batch_size = 1;
        let data = tiny_set();
        let table = run_ablation(&cfg, &[LabelVariant::Ellipse, LabelVariant::Circle], &data, &data[..1]).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows.contains_key("circle"));
        let again = run_ablation(&cfg, &[LabelVariant::Ellipse], &data, &data[..1]).unwrap();
        assert_eq!(again.rows["ellipse"], table.rows["ellipse"]);
        assert_eq!(table.to_text().lines().count(), 3);
    }
}
