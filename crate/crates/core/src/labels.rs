//! Per-cell classification labels and training point sampling.
//!
//! Each scheme defines a nested pair of regions around the ground-truth
//! center: cells inside the inner region are positive, cells outside the
//! outer region negative, and everything in between is ignored.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GridSpec, Point};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

impl Label {
    pub fn symbol(self) -> char {
        match self {
            Label::Positive => '+',
            Label::Negative => '-',
            Label::Ignore => '.',
        }
    }
}

/// Shape family used to carve out the positive and negative regions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelVariant {
    #[default]
    Ellipse,
    Circle,
    Rectangle,
}

impl LabelVariant {
    pub const ALL: [LabelVariant; 3] = [
        LabelVariant::Ellipse,
        LabelVariant::Circle,
        LabelVariant::Rectangle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelVariant::Ellipse => "ellipse",
            LabelVariant::Circle => "circle",
            LabelVariant::Rectangle => "rectangle",
        }
    }
}

impl fmt::Display for LabelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LabelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ellipse" => Ok(LabelVariant::Ellipse),
            "circle" => Ok(LabelVariant::Circle),
            "rectangle" | "rect" => Ok(LabelVariant::Rectangle),
            other => Err(Error::Config(format!("unknown label variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignmentConfig {
    pub variant: LabelVariant,
    /// Points exactly on the inner border count as positive instead of
    /// ignored. The outer border stays ignored either way.
    pub boundary_inclusive: bool,
}

/// `w x h` grid of labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    w: usize,
    h: usize,
    cells: Vec<Label>,
}

impl LabelMap {
    pub fn from_cells(w: usize, h: usize, cells: Vec<Label>) -> Result<Self> {
        if cells.len() != w * h {
            return Err(Error::Shape(format!(
                "{} labels for a {w}x{h} grid",
                cells.len()
            )));
        }
        Ok(Self { w, h, cells })
    }

    pub fn width(&self) -> usize {
        self.w
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn cells(&self) -> &[Label] {
        &self.cells
    }

    pub fn get(&self, i: usize, j: usize) -> Label {
        self.cells[j * self.w + i]
    }

    pub fn count(&self, label: Label) -> usize {
        self.cells.iter().filter(|&&l| l == label).count()
    }

    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(idx, _)| idx)
            .collect()
    }

    /// One text row per grid row using `+`, `-` and `.`.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity((self.w + 1) * self.h);
        for row in self.cells.chunks(self.w) {
            out.extend(row.iter().map(|l| l.symbol()));
            out.push('\n');
        }
        out
    }
}

/// Normalized "radius" of `p` for each shape: below 1 inside, above 1
/// outside. `scale` is 1 for the outer region and 1/2 for the inner one.
fn shape_measure(variant: LabelVariant, p: Point, gt: &BBox, scale: f64) -> f64 {
    let c = gt.center();
    let (dx, dy) = (p.x - c.x, p.y - c.y);
    match variant {
        LabelVariant::Ellipse => {
            let ax = gt.width() / 2.0 * scale;
            let ay = gt.height() / 2.0 * scale;
            (dx * dx) / (ax * ax) + (dy * dy) / (ay * ay)
        }
        LabelVariant::Circle => {
            // Squared radius sqrt(w*h)/2 * scale, kept free of the root.
            let r2 = gt.width() * gt.height() / 4.0 * (scale * scale);
            (dx * dx + dy * dy) / r2
        }
        LabelVariant::Rectangle => {
            let hx = gt.width() / 2.0 * scale;
            let hy = gt.height() / 2.0 * scale;
            (dx.abs() / hx).max(dy.abs() / hy)
        }
    }
}

/// Label of a single image point.
///
/// Positive points are additionally required to lie strictly inside `gt`,
/// which only bites for the circle scheme on boxes with aspect ratio above
/// 4 where the inner circle pokes out of the box.
pub fn label_point(p: Point, gt: &BBox, cfg: &AssignmentConfig) -> Label {
    let inner = shape_measure(cfg.variant, p, gt, 0.5);
    let outer = shape_measure(cfg.variant, p, gt, 1.0);
    let in_inner = if cfg.boundary_inclusive {
        inner <= 1.0
    } else {
        inner < 1.0
    };
    let out_outer = outer > 1.0;
    if in_inner && !out_outer && gt.contains_strict(p) {
        Label::Positive
    } else if out_outer && !in_inner {
        Label::Negative
    } else {
        Label::Ignore
    }
}

/// Labels every cell of `spec` against `gt`. The box is used as given even
/// when it extends past the search patch.
pub fn assign(gt: &BBox, spec: &GridSpec, cfg: &AssignmentConfig) -> LabelMap {
    let cells = spec.points().map(|(_, p)| label_point(p, gt, cfg)).collect();
    LabelMap {
        w: spec.w,
        h: spec.h,
        cells,
    }
}

pub fn assign_ellipse(gt: &BBox, spec: &GridSpec) -> LabelMap {
    assign(gt, spec, &AssignmentConfig::default())
}

pub fn assign_circle(gt: &BBox, spec: &GridSpec) -> LabelMap {
    let cfg = AssignmentConfig {
        variant: LabelVariant::Circle,
        ..Default::default()
    };
    assign(gt, spec, &cfg)
}

pub fn assign_rectangle(gt: &BBox, spec: &GridSpec) -> LabelMap {
    let cfg = AssignmentConfig {
        variant: LabelVariant::Rectangle,
        ..Default::default()
    };
    assign(gt, spec, &cfg)
}

/// Flat cell indices chosen for one training pair.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSelection {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl SampleSelection {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const MAX_POSITIVES: usize = 16;
pub const MAX_NEGATIVES: usize = 48;

fn subsample<R: Rng + ?Sized>(pool: Vec<usize>, cap: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() <= cap {
        return pool;
    }
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), cap)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picked.sort_unstable();
    picked
}

/// Caps positives and negatives by uniform sampling without replacement.
/// Ignored cells are never selected.
pub fn sample_training_points<R: Rng + ?Sized>(
    labels: &LabelMap,
    max_pos: usize,
    max_neg: usize,
    rng: &mut R,
) -> Result<SampleSelection> {
    let pos = labels.indices_of(Label::Positive);
    if pos.is_empty() {
        return Err(Error::NoPositives);
    }
    let neg = labels.indices_of(Label::Negative);
    let positives = subsample(pos, max_pos, rng);
    let negatives = subsample(neg, max_neg, rng);
    Ok(SampleSelection {
        positives,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gt_64x32() -> BBox {
        BBox::from_center(127.0, 127.0, 64.0, 32.0).unwrap()
    }

    fn at(x: f64, y: f64, variant: LabelVariant) -> Label {
        let cfg = AssignmentConfig {
            variant,
            boundary_inclusive: false,
        };
        label_point(Point::new(x, y), &gt_64x32(), &cfg)
    }

    #[test]
    fn ellipse_examples() {
        assert_eq!(at(127.0, 127.0, LabelVariant::Ellipse), Label::Positive);
        assert_eq!(at(167.0, 127.0, LabelVariant::Ellipse), Label::Negative);
        assert_eq!(at(147.0, 127.0, LabelVariant::Ellipse), Label::Ignore);
        let map = assign_ellipse(&gt_64x32(), &GridSpec::canonical());
        assert_eq!(map.get(12, 12), Label::Positive);
    }

    #[test]
    fn circle_examples() {
        assert_eq!(at(127.0, 127.0, LabelVariant::Circle), Label::Positive);
        assert_eq!(at(143.0, 127.0, LabelVariant::Circle), Label::Ignore);
        assert_eq!(at(157.0, 127.0, LabelVariant::Circle), Label::Negative);
    }

    #[test]
    fn rectangle_examples() {
        assert_eq!(at(127.0, 127.0, LabelVariant::Rectangle), Label::Positive);
        assert_eq!(at(150.0, 127.0, LabelVariant::Rectangle), Label::Ignore);
        assert_eq!(at(170.0, 127.0, LabelVariant::Rectangle), Label::Negative);
    }

    #[test]
    fn boundary_points_default_to_ignore() {
        // (143,127) sits exactly on the inner ellipse, (159,127) on the outer.
        let strict = AssignmentConfig::default();
        let incl = AssignmentConfig {
            boundary_inclusive: true,
            ..strict
        };
        let gt = gt_64x32();
        assert_eq!(label_point(Point::new(143.0, 127.0), &gt, &strict), Label::Ignore);
        assert_eq!(label_point(Point::new(159.0, 127.0), &gt, &strict), Label::Ignore);
        assert_eq!(label_point(Point::new(143.0, 127.0), &gt, &incl), Label::Positive);
        // The flag only widens the positive region.
        assert_eq!(label_point(Point::new(159.0, 127.0), &gt, &incl), Label::Ignore);
    }

    #[test]
    fn elongated_circle_positives_stay_in_box() {
        let gt = BBox::from_center(127.0, 127.0, 200.0, 20.0).unwrap();
        let map = assign_circle(&gt, &GridSpec::canonical());
        let spec = GridSpec::canonical();
        for idx in map.indices_of(Label::Positive) {
            assert!(gt.contains_strict(spec.point_of_index(idx).unwrap()));
        }
    }

    #[test]
    fn render_grid() {
        let gt = gt_64x32();
        let spec = GridSpec::new(5, 3, 8, 41, 25).unwrap();
        let shifted = BBox::from_center(20.0, 12.0, gt.width(), gt.height()).unwrap();
        let text = assign_ellipse(&shifted, &spec).render();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.len() == 5));
        assert_eq!(text.lines().nth(1).unwrap().chars().nth(2), Some('+'));
    }

    fn map_with(pos: usize, neg: usize) -> LabelMap {
        let mut cells = vec![Label::Positive; pos];
        cells.extend(std::iter::repeat(Label::Negative).take(neg));
        cells.extend(std::iter::repeat(Label::Ignore).take(25 * 25 - pos - neg));
        LabelMap::from_cells(25, 25, cells).unwrap()
    }

    #[test]
    fn sampling_caps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sel = sample_training_points(&map_with(5, 200), 16, 48, &mut rng).unwrap();
        assert_eq!(sel.positives, vec![0, 1, 2, 3, 4]);
        assert_eq!(sel.negatives.len(), 48);
        assert!(sel.negatives.iter().all(|&i| (5..205).contains(&i)));

        let sel = sample_training_points(&map_with(30, 0), 16, 48, &mut rng).unwrap();
        assert_eq!(sel.positives.len(), 16);
        assert!(sel.negatives.is_empty());

        assert!(matches!(
            sample_training_points(&map_with(0, 10), 16, 48, &mut rng),
            Err(Error::NoPositives)
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let map = map_with(40, 300);
        let a = sample_training_points(&map, 16, 48, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_training_points(&map, 16, 48, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    fn variant() -> impl Strategy<Value = LabelVariant> {
        prop_oneof![
            Just(LabelVariant::Ellipse),
            Just(LabelVariant::Circle),
            Just(LabelVariant::Rectangle)
        ]
    }

    proptest! {
        #[test]
        fn partition_and_positive_inside(
            cx in 60.0f64..195.0, cy in 60.0f64..195.0,
            w in 4.0f64..250.0, h in 4.0f64..250.0,
            v in variant(), incl in any::<bool>(),
        ) {
            let gt = BBox::from_center(cx, cy, w, h).unwrap();
            let spec = GridSpec::canonical();
            let cfg = AssignmentConfig { variant: v, boundary_inclusive: incl };
            let map = assign(&gt, &spec, &cfg);
            prop_assert_eq!(
                map.count(Label::Positive) + map.count(Label::Negative) + map.count(Label::Ignore),
                625
            );
            for idx in map.indices_of(Label::Positive) {
                let p = spec.point_of_index(idx).unwrap();
                prop_assert!(crate::geometry::encode_targets(p, &gt).unwrap().all_positive());
            }
        }

        #[test]
        fn shrinking_never_promotes_negatives(
            cx in 60.0f64..195.0, cy in 60.0f64..195.0,
            w in 4.0f64..250.0, h in 4.0f64..250.0,
            sw in 0.1f64..1.0, sh in 0.1f64..1.0, v in variant(),
        ) {
            let spec = GridSpec::canonical();
            let cfg = AssignmentConfig { variant: v, boundary_inclusive: false };
            let big = assign(&BBox::from_center(cx, cy, w, h).unwrap(), &spec, &cfg);
            let small = assign(&BBox::from_center(cx, cy, w * sw, h * sh).unwrap(), &spec, &cfg);
            for (b, s) in big.cells().iter().zip(small.cells()) {
                prop_assert!(!(*b == Label::Negative && *s == Label::Positive));
            }
        }
    }
}
