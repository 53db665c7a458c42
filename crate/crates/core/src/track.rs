//! Offline-trained tracker: the template is embedded once, then every frame
//! is scored with a scale-change penalty and a cosine window before the
//! best candidate box is smoothed into the running state.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::{crop_patch, crop_region, mean_color, CropSpec};
use crate::error::{Error, Result};
use crate::geometry::{BBox, GridSpec};
use crate::model::{MultiLevelFeatures, Role, SiameseModel};

/// Minimum side length of a returned box, in frame pixels.
pub const MIN_BOX_SIDE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub penalty_k: f64,
    pub window_influence: f64,
    pub size_lr: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            penalty_k: 0.14,
            window_influence: 0.45,
            size_lr: 0.30,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_k >= 0.0 && (0.0..=1.0).contains(&self.window_influence)) {
            return Err(Error::Config("penalty_k must be >= 0 and window_influence in [0, 1]".into()));
        }
        if !(self.size_lr > 0.0 && self.size_lr <= 1.0) {
            return Err(Error::Config("size_lr must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    // Evaluated on the folded index so the window is exactly symmetric.
    (0..n)
        .map(|k| k.min(n - 1 - k))
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Outer product of 1-D Hann windows, row-major `h x w`.
pub fn cosine_window(w: usize, h: usize) -> Vec<f64> {
    let (hx, hy) = (hann(w), hann(h));
    hy.iter().flat_map(|&y| hx.iter().map(move |&x| x * y)).collect()
}

fn change(r: f64) -> f64 {
    r.max(1.0 / r)
}

/// Context-padded scale of a `w x h` box.
fn padded_size(w: f64, h: f64) -> f64 {
    let pad = (w + h) / 2.0;
    ((w + pad) * (h + pad)).sqrt()
}

/// Penalty for a candidate of size `(cw, ch)` against the previous size
/// `(pw, ph)`, both in the same coordinates.
pub fn scale_penalty(cw: f64, ch: f64, pw: f64, ph: f64, k: f64) -> f64 {
    let size = change(padded_size(cw, ch) / padded_size(pw, ph));
    let aspect = change((pw / ph) / (cw / ch));
    (-(size * aspect - 1.0) * k).exp()
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub template: MultiLevelFeatures,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Frame-to-patch scale of the most recent search crop.
    pub scale: f64,
}

impl TrackerState {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h).expect("state size stays positive")
    }
}

/// Result of one tracked frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameOutcome {
    pub bbox: BBox,
    /// The chosen cell's decoded box before size smoothing and clamping.
    pub candidate: BBox,
    /// Foreground probability of the chosen cell.
    pub score: f64,
}

pub struct Tracker<'m> {
    model: &'m SiameseModel,
    cfg: PostprocessConfig,
    crop: CropSpec,
    grid: GridSpec,
    window: Vec<f64>,
    state: Option<TrackerState>,
}

fn clamp_to_frame(b: &BBox, fw: f64, fh: f64) -> Result<BBox> {
    let x1 = b.x1().max(0.0);
    let y1 = b.y1().max(0.0);
    let x2 = b.x2().min(fw);
    let y2 = b.y2().min(fh);
    BBox::new(x1, y1, x2, y2).map_err(|_| Error::InvalidBox(format!("{b} lies outside the {fw}x{fh} frame")))
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m SiameseModel, cfg: PostprocessConfig, crop: CropSpec) -> Result<Self> {
        cfg.validate()?;
        crop.validate()?;
        let grid = model.grid_spec();
        Ok(Self {
            model,
            cfg,
            crop,
            window: cosine_window(grid.w, grid.h),
            grid,
            state: None,
        })
    }

    pub fn state(&self) -> Option<&TrackerState> {
        self.state.as_ref()
    }

    /// Embeds the template around `bbox`, clamped to the frame.
    pub fn init(&mut self, frame: &RgbImage, bbox: &BBox) -> Result<()> {
        let b = clamp_to_frame(bbox, frame.width() as f64, frame.height() as f64)?;
        let patch = crop_patch(frame, &b, &self.crop, Role::Template);
        let template = self.model.extract_features(&patch, Role::Template)?;
        let c = b.center();
        self.state = Some(TrackerState {
            template,
            cx: c.x,
            cy: c.y,
            w: b.width(),
            h: b.height(),
            scale: 1.0,
        });
        Ok(())
    }

    pub fn track_frame(&mut self, frame: &RgbImage) -> Result<FrameOutcome> {
        let st = self.state.as_mut().ok_or(Error::Uninitialized)?;
        let out_size = self.crop.search_size;
        let side = self.crop.window_side(st.w, st.h, Role::Search);
        let scale = out_size as f64 / side;
        let patch = crop_region(frame, st.cx, st.cy, side, out_size, mean_color(frame));
        let out = self.model.predict(&st.template, &patch)?;

        let cells = self.grid.cells();
        let (cls, reg) = (out.cls.data(), out.reg.data());
        let (pw, ph) = (st.w * scale, st.h * scale);
        let mut best = (f64::NEG_INFINITY, 0usize, 0.0, 0.0);
        for idx in 0..cells {
            let score = 1.0 / (1.0 + ((cls[idx] - cls[cells + idx]) as f64).exp());
            let [l, t, r, b] = std::array::from_fn(|k| reg[k * cells + idx] as f64);
            let penalty = scale_penalty(l + r, t + b, pw, ph, self.cfg.penalty_k);
            let wi = self.cfg.window_influence;
            let pscore = penalty * score * (1.0 - wi) + self.window[idx] * wi;
            if pscore > best.0 {
                best = (pscore, idx, penalty, score);
            }
        }
        let (_, idx, penalty, score) = best;
        let p = self.grid.point_of_index(idx)?;
        let [l, t, r, b] = std::array::from_fn(|k| reg[k * cells + idx] as f64);
        let half = out_size as f64 / 2.0;
        let ccx = (p.x + (r - l) / 2.0 - half) / scale + st.cx;
        let ccy = (p.y + (b - t) / 2.0 - half) / scale + st.cy;
        let (cw, ch) = ((l + r) / scale, (t + b) / scale);
        let lr = self.cfg.size_lr * penalty * score;
        let candidate = BBox::from_center(ccx, ccy, cw, ch)?;

        let (fw, fh) = (frame.width() as f64, frame.height() as f64);
        st.w = (st.w * (1.0 - lr) + cw * lr).clamp(MIN_BOX_SIDE, fw.max(MIN_BOX_SIDE));
        st.h = (st.h * (1.0 - lr) + ch * lr).clamp(MIN_BOX_SIDE, fh.max(MIN_BOX_SIDE));
        st.cx = ccx.clamp(0.0, fw);
        st.cy = ccy.clamp(0.0, fh);
        st.scale = scale;
        Ok(FrameOutcome {
            bbox: st.bbox(),
            candidate,
            score,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_sequence, MotionSpec};
    use crate::model::{Level, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(reduced: usize) -> SiameseModel {
        SiameseModel::new(
            ModelConfig {
                levels: Level::ALL.to_vec(),
                reduced_channels: Some(reduced),
                tiny_width: 4,
                ..Default::default()
            },
            2,
        )
        .unwrap()
    }

    fn frame() -> (RgbImage, BBox) {
        let seq = make_synthetic_sequence("t", 2, &MotionSpec::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        ((*seq.frame(0).unwrap()).clone(), seq.boxes[0])
    }

    #[test]
    fn window_properties() {
        let w = cosine_window(25, 25);
        assert_eq!(w[0], 0.0);
        assert_eq!(w[24], 0.0);
        assert!((w[12 * 25 + 12] - 1.0).abs() < 1e-15);
        for j in 0..25 {
            for i in 0..25 {
                let v = w[j * 25 + i];
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(v, w[j * 25 + (24 - i)]);
                assert_eq!(v, w[(24 - j) * 25 + i]);
            }
        }
        assert_eq!(cosine_window(1, 1), vec![1.0]);
        let rect = cosine_window(5, 3);
        assert_eq!(rect.len(), 15);
        assert_eq!(rect[7], 1.0);
    }

    #[test]
    fn penalty_properties() {
        assert_eq!(scale_penalty(40.0, 20.0, 40.0, 20.0, 0.14), 1.0);
        for (cw, ch) in [(41.0, 20.0), (20.0, 40.0), (80.0, 40.0), (10.0, 10.0)] {
            let p = scale_penalty(cw, ch, 40.0, 20.0, 0.14);
            assert!(p < 1.0 && p > 0.0);
        }
        assert_eq!(scale_penalty(80.0, 40.0, 40.0, 20.0, 0.0), 1.0);
    }

    #[test]
    fn init_contract() {
        let m = model(256);
        let (img, b) = frame();
        let mut t = Tracker::new(&m, PostprocessConfig::default(), CropSpec::default()).unwrap();
        assert!(matches!(t.track_frame(&img), Err(Error::Uninitialized)));
        t.init(&img, &b).unwrap();
        let st = t.state().unwrap();
        let back = st.bbox();
        assert!((back.x1() - b.x1()).abs() < 1e-9 && (back.y2() - b.y2()).abs() < 1e-9);
        for map in &st.template.maps {
            assert_eq!(map.shape(), (256, 7, 7));
        }
        let mut t2 = Tracker::new(&m, PostprocessConfig::default(), CropSpec::default()).unwrap();
        t2.init(&img, &b).unwrap();
        assert_eq!(t2.state().unwrap().template, st.template);
    }

    #[test]
    fn init_rejects_boxes_off_frame() {
        let m = model(8);
        let (img, _) = frame();
        let mut t = Tracker::new(&m, PostprocessConfig::default(), CropSpec::default()).unwrap();
        assert!(t.init(&img, &BBox::new(400.0, 300.0, 420.0, 330.0).unwrap()).is_err());
        t.init(&img, &BBox::new(-5.0, -5.0, 30.0, 30.0).unwrap()).unwrap();
        assert_eq!(t.state().unwrap().bbox().x1(), 0.0);
    }

    #[test]
    fn full_window_influence_picks_center_cell() {
        let m = model(8);
        let (img, b) = frame();
        let cfg = PostprocessConfig {
            window_influence: 1.0,
            ..Default::default()
        };
        let mut t = Tracker::new(&m, cfg, CropSpec::default()).unwrap();
        t.init(&img, &b).unwrap();
        let before = t.state().unwrap().clone();
        t.track_frame(&img).unwrap();
        // Only the center cell can win, so the center moves by that cell's
        // predicted offset alone.
        let patch = crop_region(&img, before.cx, before.cy, CropSpec::default().window_side(before.w, before.h, Role::Search), 255, mean_color(&img));
        let out = m.predict(&before.template, &patch).unwrap();
        let c = 12 * 25 + 12;
        let (l, r) = (out.reg.data()[c] as f64, out.reg.data()[2 * 625 + c] as f64);
        let scale = t.state().unwrap().scale;
        let expect = before.cx + (127.0 + (r - l) / 2.0 - 127.5) / scale;
        assert!((t.state().unwrap().cx - expect).abs() < 1e-6);
    }

    #[test]
    fn tracking_is_deterministic_and_smooths_size() {
        let m = model(8);
        let seq = make_synthetic_sequence("d", 6, &MotionSpec::default(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let cfg = PostprocessConfig::default();
        let run = || {
            let mut t = Tracker::new(&m, cfg, CropSpec::default()).unwrap();
            t.init(&seq.frame(0).unwrap(), &seq.boxes[0]).unwrap();
            let mut prev = t.state().unwrap().bbox();
            (1..seq.len())
                .map(|i| {
                    let o = t.track_frame(&seq.frame(i).unwrap()).unwrap();
                    assert!(o.bbox.width() >= MIN_BOX_SIDE && o.bbox.height() >= MIN_BOX_SIDE);
                    let dw = (o.bbox.width() - prev.width()).abs();
                    assert!(dw <= cfg.size_lr * (o.candidate.width() - prev.width()).abs() + 1e-9);
                    let dh = (o.bbox.height() - prev.height()).abs();
                    assert!(dh <= cfg.size_lr * (o.candidate.height() - prev.height()).abs() + 1e-9);
                    prev = o.bbox;
                    o.bbox
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
