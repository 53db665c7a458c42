//! Sequences on disk and in memory, patch cropping, training-pair sampling
//! and the synthetic sequence generator.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::Role;
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug)]
pub enum FrameSource {
    File(PathBuf),
    Memory(Arc<RgbImage>),
}

impl FrameSource {
    pub fn load(&self) -> Result<Arc<RgbImage>> {
        match self {
            FrameSource::Memory(img) => Ok(Arc::clone(img)),
            FrameSource::File(p) => {
                let img = image::open(p).map_err(|e| Error::Sequence {
                    path: p.clone(),
                    msg: format!("unreadable image: {e}"),
                })?;
                Ok(Arc::new(img.to_rgb8()))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<FrameSource>,
    pub boxes: Vec<BBox>,
    /// Free-form tags used for per-attribute score breakdowns.
    pub attributes: Vec<String>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, i: usize) -> Result<Arc<RgbImage>> {
        self.frames
            .get(i)
            .ok_or_else(|| Error::Sequence {
                path: PathBuf::from(&self.name),
                msg: format!("frame {i} out of range ({} frames)", self.frames.len()),
            })?
            .load()
    }
}

fn seq_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Sequence {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Image files under `path/frames`, in name order, each checked for a
/// readable header.
pub fn list_frames(path: &Path) -> Result<Vec<PathBuf>> {
    let frames_dir = path.join("frames");
    if !frames_dir.is_dir() {
        return Err(seq_err(path, "missing frames/ directory"));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&frames_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    for f in &files {
        image::image_dimensions(f).map_err(|e| seq_err(f, format!("unreadable image: {e}")))?;
    }
    Ok(files)
}

/// Reads `frames/NNNN.ext` plus `groundtruth.txt` (one `x,y,w,h` per line)
/// and an optional `attributes.txt` of comma-separated tags.
pub fn load_sequence(path: &Path) -> Result<SequenceRecord> {
    let files = list_frames(path)?;

    let gt_path = path.join("groundtruth.txt");
    let text = fs::read_to_string(&gt_path).map_err(|e| seq_err(&gt_path, e.to_string()))?;
    let boxes = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.parse::<BBox>()
                .map_err(|e| seq_err(&gt_path, format!("line {}: {e}", n + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    if boxes.len() != files.len() {
        return Err(seq_err(
            path,
            format!("{} frames but {} ground-truth boxes", files.len(), boxes.len()),
        ));
    }
    if boxes.is_empty() {
        return Err(seq_err(path, "sequence has no frames"));
    }

    let attributes = match fs::read_to_string(path.join("attributes.txt")) {
        Ok(s) => s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect(),
        Err(_) => Vec::new(),
    };
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("sequence")
        .to_string();
    Ok(SequenceRecord {
        name,
        frames: files.into_iter().map(FrameSource::File).collect(),
        boxes,
        attributes,
    })
}

/// Loads every subdirectory of `root` that holds a `groundtruth.txt`, in
/// name order.
pub fn load_sequence_set(root: &Path) -> Result<Vec<SequenceRecord>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| seq_err(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(seq_err(root, "no sequences found"));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

/// Writes a sequence in the layout [`load_sequence`] reads.
pub fn write_sequence(dir: &Path, seq: &SequenceRecord) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.load()?.save(frames_dir.join(format!("{:04}.png", i + 1)))?;
    }
    let mut gt = String::new();
    for b in &seq.boxes {
        gt.push_str(&b.to_xywh_line());
        gt.push('\n');
    }
    fs::write(dir.join("groundtruth.txt"), gt)?;
    if !seq.attributes.is_empty() {
        fs::write(dir.join("attributes.txt"), seq.attributes.join(",") + "\n")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropSpec {
    pub context_amount: f64,
    pub template_size: usize,
    pub search_size: usize,
    /// Largest target offset from the search-patch center, in patch pixels.
    pub max_shift: f64,
    /// Largest relative change of the search window side.
    pub max_scale_jitter: f64,
    /// Largest frame distance between template and search frames.
    pub max_gap: usize,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            context_amount: 0.5,
            template_size: 127,
            search_size: 255,
            max_shift: 64.0,
            max_scale_jitter: 0.05,
            max_gap: 100,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        if self.template_size == 0 || self.search_size < self.template_size {
            return Err(Error::Config("crop sizes must satisfy 0 < template <= search".into()));
        }
        if !(self.context_amount >= 0.0 && self.max_shift >= 0.0 && (0.0..1.0).contains(&self.max_scale_jitter)) {
            return Err(Error::Config("crop context and jitter ranges must be non-negative".into()));
        }
        Ok(())
    }

    pub fn output_size(&self, role: Role) -> usize {
        match role {
            Role::Template => self.template_size,
            Role::Search => self.search_size,
        }
    }

    /// Side (frame pixels) of the template window for a `w x h` target.
    pub fn template_side(&self, w: f64, h: f64) -> f64 {
        let c = self.context_amount * (w + h);
        ((w + c) * (h + c)).sqrt()
    }

    /// Side of the window cropped for `role`; the search window keeps the
    /// template's frame-to-patch scale.
    pub fn window_side(&self, w: f64, h: f64, role: Role) -> f64 {
        let sz = self.template_side(w, h);
        match role {
            Role::Template => sz,
            Role::Search => sz * self.search_size as f64 / self.template_size as f64,
        }
    }
}

pub fn mean_color(frame: &RgbImage) -> [f32; 3] {
    let mut acc = [0f64; 3];
    for p in frame.pixels() {
        for k in 0..3 {
            acc[k] += p[k] as f64;
        }
    }
    let n = (frame.width() as f64 * frame.height() as f64).max(1.0);
    acc.map(|v| (v / n) as f32)
}

/// Bilinear resampling of the square window of `side` frame pixels centered
/// at `(cx, cy)` into an `out x out` patch of raw `[0, 255]` values.
/// Samples that fall off the frame take the `pad` color.
pub fn crop_region(frame: &RgbImage, cx: f64, cy: f64, side: f64, out: usize, pad: [f32; 3]) -> Tensor {
    let (fw, fh) = (frame.width() as i64, frame.height() as i64);
    let scale = side / out as f64;
    let mut patch = Tensor::zeros(3, out, out);
    let plane = out * out;
    let raw = frame.as_raw();
    let fetch = |x: i64, y: i64, k: usize| -> f32 {
        if x < 0 || y < 0 || x >= fw || y >= fh {
            pad[k]
        } else {
            raw[((y * fw + x) * 3) as usize + k] as f32
        }
    };
    let half = out as f64 / 2.0;
    let data = patch.data_mut();
    for v in 0..out {
        let sy = cy + (v as f64 + 0.5 - half) * scale - 0.5;
        let y0 = sy.floor();
        let ty = (sy - y0) as f32;
        let y0 = y0 as i64;
        for u in 0..out {
            let sx = cx + (u as f64 + 0.5 - half) * scale - 0.5;
            let x0 = sx.floor();
            let tx = (sx - x0) as f32;
            let x0 = x0 as i64;
            for k in 0..3 {
                let top = fetch(x0, y0, k) * (1.0 - tx) + fetch(x0 + 1, y0, k) * tx;
                let bot = fetch(x0, y0 + 1, k) * (1.0 - tx) + fetch(x0 + 1, y0 + 1, k) * tx;
                data[k * plane + v * out + u] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    patch
}

/// Context crop around `bbox`, resized to the role's patch size.
pub fn crop_patch(frame: &RgbImage, bbox: &BBox, spec: &CropSpec, role: Role) -> Tensor {
    let c = bbox.center();
    let side = spec.window_side(bbox.width(), bbox.height(), role);
    crop_region(frame, c.x, c.y, side, spec.output_size(role), mean_color(frame))
}

/// Maps a frame-space box into a patch cut from the window of `side` pixels
/// centered at `(cx, cy)`.
pub fn box_to_patch(bbox: &BBox, cx: f64, cy: f64, side: f64, out: usize) -> Result<BBox> {
    let k = out as f64 / side;
    let half = out as f64 / 2.0;
    BBox::new(
        (bbox.x1() - cx) * k + half,
        (bbox.y1() - cy) * k + half,
        (bbox.x2() - cx) * k + half,
        (bbox.y2() - cy) * k + half,
    )
}

#[derive(Clone, Debug)]
pub struct PairSample {
    pub template: Tensor,
    pub search: Tensor,
    /// Target box in search-patch pixels.
    pub gt: BBox,
    pub sequence: String,
    pub template_frame: usize,
    pub search_frame: usize,
}

const MAX_RETRIES: usize = 64;

/// Draws a template/search pair from one sequence, jittering the search
/// window's position and scale.
pub fn sample_pair<R: Rng + ?Sized>(dataset: &[SequenceRecord], rng: &mut R, spec: &CropSpec) -> Result<PairSample> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot sample pairs from an empty dataset".into()));
    }
    for _ in 0..MAX_RETRIES {
        let seq = &dataset[rng.gen_range(0..dataset.len())];
        if seq.is_empty() || seq.boxes.len() != seq.frames.len() {
            continue;
        }
        let n = seq.len();
        let a = rng.gen_range(0..n);
        let lo = a.saturating_sub(spec.max_gap);
        let hi = (a + spec.max_gap).min(n - 1);
        let b = rng.gen_range(lo..=hi);

        let zbox = seq.boxes[a];
        let xbox = seq.boxes[b];
        let zframe = seq.frame(a)?;
        let xframe = if a == b { Arc::clone(&zframe) } else { seq.frame(b)? };
        let template = crop_patch(&zframe, &zbox, spec, Role::Template);

        let out = spec.search_size;
        let jitter = if spec.max_scale_jitter > 0.0 {
            rng.gen_range(-spec.max_scale_jitter..=spec.max_scale_jitter)
        } else {
            0.0
        };
        let side = spec.window_side(xbox.width(), xbox.height(), Role::Search) * (1.0 + jitter);
        let k = out as f64 / side;
        // Keep the whole target at least one pixel inside the patch.
        let limit = |extent: f64| (out as f64 / 2.0 - extent * k / 2.0 - 1.0).clamp(0.0, spec.max_shift);
        let (lx, ly) = (limit(xbox.width()), limit(xbox.height()));
        let dx = if lx > 0.0 { rng.gen_range(-lx..=lx) } else { 0.0 };
        let dy = if ly > 0.0 { rng.gen_range(-ly..=ly) } else { 0.0 };
        let c = xbox.center();
        let (cx, cy) = (c.x - dx / k, c.y - dy / k);
        let gt = box_to_patch(&xbox, cx, cy, side, out)?;
        let search = crop_region(&xframe, cx, cy, side, out, mean_color(&xframe));
        return Ok(PairSample {
            template,
            search,
            gt,
            sequence: seq.name.clone(),
            template_frame: a,
            search_frame: b,
        });
    }
    Err(Error::Config("no usable sequence found after repeated sampling".into()))
}

/// Parameters of the synthetic sequence generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSpec {
    pub canvas_width: u32,
    pub canvas_height: u32,
    /// Per-axis cap on center displacement between frames, in pixels.
    pub max_speed: f64,
    /// Per-frame cap on relative change of width and of height.
    pub max_size_drift: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Number of static distractor rectangles.
    pub clutter: usize,
    /// Amplitude of per-frame uniform pixel noise.
    pub noise: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            canvas_width: 320,
            canvas_height: 240,
            max_speed: 8.0,
            max_size_drift: 0.02,
            min_size: 24.0,
            max_size: 64.0,
            clutter: 8,
            noise: 6.0,
        }
    }
}

impl MotionSpec {
    pub fn validate(&self) -> Result<()> {
        let fits = self.max_size * 2.0 < self.canvas_width.min(self.canvas_height) as f64;
        if !(self.min_size > 1.0 && self.min_size <= self.max_size && fits) {
            return Err(Error::Config("synthetic target sizes must fit the canvas".into()));
        }
        if !(self.max_speed >= 0.0 && (0.0..1.0).contains(&self.max_size_drift) && self.noise >= 0.0) {
            return Err(Error::Config("synthetic motion caps must be non-negative".into()));
        }
        Ok(())
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)]
}

struct Scene {
    background: Vec<[f64; 3]>,
    colors: [[f64; 3]; 2],
    cells: f64,
}

impl Scene {
    fn new<R: Rng + ?Sized>(spec: &MotionSpec, rng: &mut R) -> Self {
        let (w, h) = (spec.canvas_width as usize, spec.canvas_height as usize);
        let base = random_color(rng);
        let gx = rng.gen_range(-0.3..0.3);
        let gy = rng.gen_range(-0.3..0.3);
        let mut background: Vec<[f64; 3]> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                base.map(|c| c + gx * (x - w as f64 / 2.0) + gy * (y - h as f64 / 2.0))
            })
            .collect();
        for _ in 0..spec.clutter {
            let rw = rng.gen_range(8.0..spec.max_size);
            let rh = rng.gen_range(8.0..spec.max_size);
            let x0 = rng.gen_range(0.0..w as f64 - rw);
            let y0 = rng.gen_range(0.0..h as f64 - rh);
            let col = random_color(rng);
            for y in y0 as usize..(y0 + rh) as usize {
                for x in x0 as usize..(x0 + rw) as usize {
                    background[y * w + x] = col;
                }
            }
        }
        // Two contrasting checkerboard colors.
        let a = random_color(rng);
        let b = a.map(|c| (c + 128.0) % 256.0);
        Self {
            background,
            colors: [a, b],
            cells: rng.gen_range(3..=5) as f64,
        }
    }

    fn render<R: Rng + ?Sized>(&self, spec: &MotionSpec, bbox: &BBox, rng: &mut R) -> RgbImage {
        let (w, h) = (spec.canvas_width, spec.canvas_height);
        RgbImage::from_fn(w, h, |x, y| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut col = self.background[(y * w + x) as usize];
            if px > bbox.x1() && px < bbox.x2() && py > bbox.y1() && py < bbox.y2() {
                let u = ((px - bbox.x1()) / bbox.width() * self.cells).floor() as i64;
                let v = ((py - bbox.y1()) / bbox.height() * self.cells).floor() as i64;
                col = self.colors[((u + v) & 1) as usize];
            }
            let n = if spec.noise > 0.0 { spec.noise } else { 0.0 };
            Rgb(col.map(|c| {
                let jitter = if n > 0.0 { rng.gen_range(-n..=n) } else { 0.0 };
                (c + jitter).round().clamp(0.0, 255.0) as u8
            }))
        })
    }
}

/// Renders a checkerboard target moving over a static cluttered background.
/// Center displacement per axis never exceeds `max_speed` and width and
/// height change by at most `max_size_drift` per frame; the target reflects
/// off the canvas borders.
pub fn make_synthetic_sequence<R: Rng + ?Sized>(
    name: &str,
    length: usize,
    spec: &MotionSpec,
    rng: &mut R,
) -> Result<SequenceRecord> {
    if length < 2 {
        return Err(Error::Config("synthetic sequences need at least 2 frames".into()));
    }
    spec.validate()?;
    let (cw, ch) = (spec.canvas_width as f64, spec.canvas_height as f64);
    let scene = Scene::new(spec, rng);
    let mut size = [
        rng.gen_range(spec.min_size..=spec.max_size),
        rng.gen_range(spec.min_size..=spec.max_size),
    ];
    let mut center = [
        rng.gen_range(size[0] / 2.0..=cw - size[0] / 2.0),
        rng.gen_range(size[1] / 2.0..=ch - size[1] / 2.0),
    ];
    let accel = spec.max_speed / 4.0;
    let mut vel = [0.0; 2];
    for v in vel.iter_mut() {
        if spec.max_speed > 0.0 {
            *v = rng.gen_range(-spec.max_speed..=spec.max_speed);
        }
    }
    let extent = [cw, ch];
    let mut boxes = Vec::with_capacity(length);
    for t in 0..length {
        if t > 0 {
            for k in 0..2 {
                if spec.max_size_drift > 0.0 {
                    let f = 1.0 + rng.gen_range(-spec.max_size_drift..=spec.max_size_drift);
                    size[k] = (size[k] * f).clamp(spec.min_size, spec.max_size);
                }
                if accel > 0.0 {
                    vel[k] = (vel[k] + rng.gen_range(-accel..=accel)).clamp(-spec.max_speed, spec.max_speed);
                }
                let (lo, hi) = (size[k] / 2.0, extent[k] - size[k] / 2.0);
                let mut next = center[k] + vel[k];
                if next < lo {
                    next = 2.0 * lo - next;
                    vel[k] = -vel[k];
                } else if next > hi {
                    next = 2.0 * hi - next;
                    vel[k] = -vel[k];
                }
                let step = (next.clamp(lo, hi) - center[k]).clamp(-spec.max_speed, spec.max_speed);
                center[k] += step;
            }
        }
        boxes.push(BBox::from_center(center[0], center[1], size[0], size[1])?);
    }
    let frames = boxes
        .iter()
        .map(|b| FrameSource::Memory(Arc::new(scene.render(spec, b, rng))))
        .collect();

    let mut attributes = Vec::new();
    let mean_step = boxes
        .windows(2)
        .map(|w| crate::geometry::center_error(&w[0], &w[1]))
        .sum::<f64>()
        / (length - 1) as f64;
    if mean_step > spec.max_speed / 2.0 && spec.max_speed > 0.0 {
        attributes.push("fast_motion".to_string());
    }
    let areas: Vec<f64> = boxes.iter().map(BBox::area).collect();
    let (amin, amax) = areas.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    if amax / amin > 1.5 {
        attributes.push("scale_variation".to_string());
    }
    if spec.clutter >= 6 {
        attributes.push("background_clutter".to_string());
    }
    Ok(SequenceRecord {
        name: name.to_string(),
        frames,
        boxes,
        attributes,
    })
}
