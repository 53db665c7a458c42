//! Boxes, grid-to-image mapping, regression target encoding and IoU.
//!
//! Corner form `(x1, y1, x2, y2)` is canonical. Coordinates are continuous
//! pixel positions so decoded predictions may land between pixels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle with strictly positive area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    /// Builds a box from its corners, rejecting zero or negative area and
    /// non-finite coordinates.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(format!(
                "corners ({x1}, {y1}, {x2}, {y2}) do not span a positive area"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Top-left corner plus size, the layout of tracking ground-truth files.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn to_center_size(&self) -> [f64; 4] {
        let c = self.center();
        [c.x, c.y, self.width(), self.height()]
    }

    /// True when `p` lies strictly inside the box (not on its border).
    pub fn contains_strict(&self, p: Point) -> bool {
        p.x > self.x1 && p.x < self.x2 && p.y > self.y1 && p.y < self.y2
    }

    /// Scales all coordinates about the origin.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.x1 * factor,
            self.y1 * factor,
            self.x2 * factor,
            self.y2 * factor,
        )
    }

    /// Formats as an `x,y,w,h` ground-truth line.
    pub fn to_xywh_line(&self) -> String {
        let [x, y, w, h] = self.to_xywh();
        format!("{x:.4},{y:.4},{w:.4},{h:.4}")
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

impl FromStr for BBox {
    type Err = Error;

    /// Parses an `x,y,w,h` line. Tabs and spaces are accepted as separators
    /// too, since several public benchmarks mix them.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .collect();
        if parts.len() != 4 {
            return Err(Error::InvalidBox(format!(
                "expected 4 comma-separated values, got {:?}",
                s.trim()
            )));
        }
        let mut v = [0.0; 4];
        for (slot, tok) in v.iter_mut().zip(&parts) {
            *slot = tok
                .parse::<f64>()
                .map_err(|_| Error::InvalidBox(format!("not a number: {tok:?}")))?;
        }
        Self::from_xywh(v[0], v[1], v[2], v[3])
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Correlation-map geometry: map size, total network stride and the size of
/// the search patch the map was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub w: usize,
    pub h: usize,
    pub stride: usize,
    pub im_w: usize,
    pub im_h: usize,
}

impl GridSpec {
    pub fn new(w: usize, h: usize, stride: usize, im_w: usize, im_h: usize) -> Result<Self> {
        let spec = Self {
            w,
            h,
            stride,
            im_w,
            im_h,
        };
        if stride == 0 || w == 0 || h == 0 {
            return Err(Error::Config(format!("degenerate grid {spec:?}")));
        }
        // Extreme cells must land inside the patch.
        let lo = spec.map_unchecked(0, 0);
        let hi = spec.map_unchecked(w - 1, h - 1);
        if lo.x < 0.0 || lo.y < 0.0 || hi.x >= im_w as f64 || hi.y >= im_h as f64 {
            return Err(Error::Config(format!(
                "grid {spec:?} maps outside the {im_w}x{im_h} patch"
            )));
        }
        Ok(spec)
    }

    /// 25x25 map at stride 8 over a 255x255 search patch.
    pub fn canonical() -> Self {
        Self {
            w: 25,
            h: 25,
            stride: 8,
            im_w: 255,
            im_h: 255,
        }
    }

    pub fn cells(&self) -> usize {
        self.w * self.h
    }

    fn map_unchecked(&self, i: usize, j: usize) -> Point {
        let s = self.stride as i64;
        let x = (self.im_w / 2) as i64 + (i as i64 - (self.w / 2) as i64) * s;
        let y = (self.im_h / 2) as i64 + (j as i64 - (self.h / 2) as i64) * s;
        Point::new(x as f64, y as f64)
    }

    /// Image point at the receptive-field center of cell `(i, j)`; `i` runs
    /// along the width.
    pub fn map_grid_to_image(&self, i: usize, j: usize) -> Result<Point> {
        if i >= self.w || j >= self.h {
            return Err(Error::GridIndex {
                i,
                j,
                w: self.w,
                h: self.h,
            });
        }
        Ok(self.map_unchecked(i, j))
    }

    /// Image point for a row-major flat cell index.
    pub fn point_of_index(&self, idx: usize) -> Result<Point> {
        self.map_grid_to_image(idx % self.w, idx / self.w)
    }

    /// Iterates `(flat index, point)` over all cells in row-major order.
    pub fn points(&self) -> impl Iterator<Item = (usize, Point)> + '_ {
        (0..self.cells()).map(move |idx| (idx, self.map_unchecked(idx % self.w, idx / self.w)))
    }
}

/// Distances from a location to the left, top, right and bottom box sides.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideDistances {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl SideDistances {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.left, self.top, self.right, self.bottom]
    }

    pub fn from_array(d: [f64; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }

    pub fn all_positive(&self) -> bool {
        self.as_array().iter().all(|&v| v > 0.0)
    }
}

/// Regression target for a point strictly inside `gt`.
pub fn encode_targets(p: Point, gt: &BBox) -> Result<SideDistances> {
    if !gt.contains_strict(p) {
        return Err(Error::PointOutsideBox {
            x: p.x,
            y: p.y,
            bbox: gt.to_string(),
        });
    }
    Ok(SideDistances::new(
        p.x - gt.x1,
        p.y - gt.y1,
        gt.x2 - p.x,
        gt.y2 - p.y,
    ))
}

/// Inverse of [`encode_targets`]: the box whose sides sit at `d` from `p`.
pub fn decode_box(p: Point, d: &SideDistances) -> Result<BBox> {
    if !d.all_positive() {
        return Err(Error::NonPositiveDistance(d.as_array()));
    }
    BBox::new(p.x - d.left, p.y - d.top, p.x + d.right, p.y + d.bottom)
}

/// Intersection area over union area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Euclidean distance between box centers.
pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.center(), b.center());
    (ca.x - cb.x).hypot(ca.y - cb.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn grid_mapping_examples() {
        let g = GridSpec::canonical();
        assert_eq!(g.map_grid_to_image(12, 12).unwrap(), Point::new(127.0, 127.0));
        assert_eq!(g.map_grid_to_image(0, 0).unwrap(), Point::new(31.0, 31.0));
        assert_eq!(g.map_grid_to_image(24, 24).unwrap(), Point::new(223.0, 223.0));
        assert!(matches!(
            g.map_grid_to_image(25, 0),
            Err(Error::GridIndex { .. })
        ));
    }

    #[test]
    fn grid_mapping_is_injective_lattice() {
        let g = GridSpec::canonical();
        let mut seen = std::collections::HashSet::new();
        for (_, p) in g.points() {
            assert_eq!((p.x as i64 - 127).rem_euclid(8), 0);
            assert!(seen.insert((p.x as i64, p.y as i64)));
        }
        assert_eq!(seen.len(), 625);
    }

    #[test]
    fn grid_rejects_overflowing_layout() {
        assert!(GridSpec::new(25, 25, 16, 255, 255).is_err());
        assert!(GridSpec::new(25, 25, 0, 255, 255).is_err());
        assert!(GridSpec::new(17, 17, 8, 255, 255).is_ok());
    }

    #[test]
    fn encode_decode_examples() {
        let gt = bx(95.0, 111.0, 159.0, 143.0);
        let d = encode_targets(Point::new(127.0, 127.0), &gt).unwrap();
        assert_eq!(d, SideDistances::new(32.0, 16.0, 32.0, 16.0));
        assert_eq!(decode_box(Point::new(127.0, 127.0), &d).unwrap(), gt);

        let sq = BBox::from_center(10.0, 20.0, 6.0, 6.0).unwrap();
        let d = encode_targets(Point::new(10.0, 20.0), &sq).unwrap();
        assert_eq!(d, SideDistances::new(3.0, 3.0, 3.0, 3.0));

        let unit = SideDistances::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(decode_box(Point::new(5.0, 5.0), &unit).unwrap(), bx(4.0, 4.0, 6.0, 6.0));
    }

    #[test]
    fn encode_rejects_boundary_and_outside_points() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        assert!(encode_targets(Point::new(0.0, 5.0), &gt).is_err());
        assert!(encode_targets(Point::new(11.0, 5.0), &gt).is_err());
        assert!(decode_box(Point::new(0.0, 0.0), &SideDistances::new(1.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(1.0, 1.0, 1.0, 5.0).is_err());
        assert!(BBox::new(1.0, 1.0, 5.0, 0.0).is_err());
        assert!(BBox::new(f64::NAN, 1.0, 5.0, 6.0).is_err());
        assert!(BBox::from_xywh(0.0, 0.0, 0.0, 3.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
        // touching edges share no area
        assert_eq!(iou(&a, &bx(2.0, 0.0, 4.0, 2.0)), 0.0);
    }

    #[test]
    fn xywh_lines() {
        let b: BBox = "10,20,30,40".parse().unwrap();
        assert_eq!(b, bx(10.0, 20.0, 40.0, 60.0));
        let b: BBox = "10\t20 30,40".parse().unwrap();
        assert_eq!(b, bx(10.0, 20.0, 40.0, 60.0));
        assert!("10,20,30".parse::<BBox>().is_err());
        assert!("10,20,x,40".parse::<BBox>().is_err());
        assert!("10,20,0,40".parse::<BBox>().is_err());
        assert_eq!(b.to_xywh_line(), "10.0000,20.0000,30.0000,40.0000");
    }

    /// Counts unit pixels covered by both / either box.
    fn raster_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
        let (mut inter, mut union) = (0u32, 0u32);
        for y in -1..42 {
            for x in -1..42 {
                let ina = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
                let inb = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
                inter += (ina && inb) as u32;
                union += (ina || inb) as u32;
            }
        }
        inter as f64 / union as f64
    }

    fn int_box() -> impl Strategy<Value = [i32; 4]> {
        (0..30i32, 0..30i32, 1..11i32, 1..11i32).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
    }

    proptest! {
        #[test]
        fn iou_matches_rasterization(a in int_box(), b in int_box()) {
            let ba = bx(a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64);
            let bb = bx(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64);
            let v = iou(&ba, &bb);
            prop_assert!((v - raster_iou(a, b)).abs() < 1e-6);
            prop_assert!((v - iou(&bb, &ba)).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn encode_decode_round_trip(
            x1 in -100.0f64..100.0, y1 in -100.0f64..100.0,
            w in 0.5f64..200.0, h in 0.5f64..200.0,
            fx in 0.001f64..0.999, fy in 0.001f64..0.999,
        ) {
            let b = bx(x1, y1, x1 + w, y1 + h);
            let p = Point::new(x1 + fx * w, y1 + fy * h);
            prop_assume!(b.contains_strict(p));
            let d = encode_targets(p, &b).unwrap();
            prop_assert!(d.all_positive());
            let back = decode_box(p, &d).unwrap();
            let (u, v): ([f64; 4], [f64; 4]) = (back.into(), b.into());
            for k in 0..4 {
                prop_assert!((u[k] - v[k]).abs() < 1e-6);
            }
        }
    }
}
