//! Axis-aligned box arithmetic.
//!
//! Boxes use the top-left `(x, y, w, h)` pixel convention of COCO annotations.
//! Boxes are closed regions, so two boxes that only share an edge have an
//! intersection of zero area.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned box with top-left corner `(x, y)` and size `w x h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    /// Creates a box, rejecting negative or non-finite dimensions.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates ({x}, {y}, {w}, {h})"
            )));
        }
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidBox(format!(
                "negative size ({x}, {y}, {w}, {h})"
            )));
        }
        let bbox = BBox { x, y, w, h };
        if !bbox.area().is_finite() {
            return Err(Error::InvalidBox(format!("area overflows for {bbox:?}")));
        }
        Ok(bbox)
    }

    /// Builds a box from its left/top/right/bottom edges.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Geometric mean of the side lengths, `sqrt(w * h)`.
    pub fn scale(&self) -> f64 {
        self.area().sqrt()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Area of the intersection with `other` (zero for edge contact).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    /// Smallest box enclosing both `self` and `other`.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        let x1 = self.x.min(other.x);
        let y1 = self.y.min(other.y);
        BBox {
            x: x1,
            y: y1,
            w: self.right().max(other.right()) - x1,
            h: self.bottom().max(other.bottom()) - y1,
        }
    }

    /// True when `self` covers `other` on all four sides.
    pub fn contains(&self, other: &BBox) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && self.right() >= other.right()
            && self.bottom() >= other.bottom()
    }

    /// Intersection with `bounds`, or `None` when they do not overlap.
    pub fn clip_to(&self, bounds: &BBox) -> Option<BBox> {
        let x1 = self.x.max(bounds.x);
        let y1 = self.y.max(bounds.y);
        let x2 = self.right().min(bounds.right());
        let y2 = self.bottom().min(bounds.bottom());
        (x2 >= x1 && y2 >= y1).then(|| BBox {
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
        })
    }

    /// Applies a single offset, reporting a degenerate result as an error.
    pub fn offset_by(&self, offset: &Offset) -> Result<BBox> {
        let w = self.w + offset.dw;
        let h = self.h + offset.dh;
        if w < 0.0 || h < 0.0 || !w.is_finite() || !h.is_finite() {
            return Err(Error::DegenerateOffset { index: 0, w, h });
        }
        BBox::new(self.x + offset.dx, self.y + offset.dy, w, h)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Additive change to a box's position and size.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offset {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Offset {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Offset { dx, dy, dw, dh }
    }

    /// The offset that maps `base` onto `target`.
    pub fn between(base: &BBox, target: &BBox) -> Self {
        Offset {
            dx: target.x - base.x,
            dy: target.y - base.y,
            dw: target.w - base.w,
            dh: target.h - base.h,
        }
    }
}

/// Intersection over union. Returns 0 when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU and the normalized center-distance penalty used by the DIoU loss.
///
/// The penalty is `|c_pred - c_gt|^2 / d^2` with `d` the diagonal of the
/// smallest box enclosing both; it is defined as 0 when `d = 0`.
pub fn diou_terms(pred: &BBox, gt: &BBox) -> (f64, f64) {
    let overlap = iou(pred, gt);
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    let rho2 = (px - gx).powi(2) + (py - gy).powi(2);
    let enc = pred.enclosing(gt);
    let d2 = enc.w * enc.w + enc.h * enc.h;
    let penalty = if d2 > 0.0 { (rho2 / d2).min(1.0) } else { 0.0 };
    (overlap, penalty)
}

/// Derives one box per offset from `base`, preserving order.
pub fn apply_offsets(base: &BBox, offsets: &[Offset]) -> Result<Vec<BBox>> {
    offsets
        .iter()
        .enumerate()
        .map(|(index, off)| {
            base.offset_by(off).map_err(|e| match e {
                Error::DegenerateOffset { w, h, .. } => Error::DegenerateOffset { index, w, h },
                other => other,
            })
        })
        .collect()
}
