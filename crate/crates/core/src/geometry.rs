//! Axis-aligned box arithmetic in absolute image pixels.
//!
//! Every box in the crate lives in the full-image pixel frame `(x1, y1, x2, y2)`.
//! Conversions to crop frames or normalized textual frames happen at the edges
//! (`grounded_text`, `providers`), never here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default IoU above which two boxes are treated as duplicates.
pub const DEFAULT_DEDUP_IOU: f64 = 0.9;

/// Axis-aligned rectangle with strictly positive area and non-negative, finite coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox { x1, y1, x2, y2, reason };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x1 < 0.0 || y1 < 0.0 {
            return Err(invalid("negative coordinate"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(invalid("zero-area or inverted"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from COCO-style `(x, y, w, h)`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
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

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
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

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Overlapping part of two boxes, if it has positive area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        )
        .ok()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Shifts the box by `(dx, dy)`; fails if the result leaves the non-negative quadrant.
    pub fn translate(&self, dx: f64, dy: f64) -> Result<BBox> {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Grows the box by `pad` on every side, clipped to `[0, width] x [0, height]`.
    pub fn padded(&self, pad: f64, width: f64, height: f64) -> Result<BBox> {
        BBox::new(
            (self.x1 - pad).max(0.0),
            (self.y1 - pad).max(0.0),
            (self.x2 + pad).min(width),
            (self.y2 + pad).min(height),
        )
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x2 <= width && self.y2 <= height
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Row-major `|gts| x |preds|` IoU matrix.
pub fn iou_matrix(gts: &[BBox], preds: &[BBox]) -> Result<Vec<Vec<f64>>> {
    if gts.is_empty() {
        return Err(Error::Empty("ground-truth box list"));
    }
    if preds.is_empty() {
        return Err(Error::Empty("prediction box list"));
    }
    Ok(gts.iter().map(|g| preds.iter().map(|p| iou(g, p)).collect()).collect())
}

/// Minimal box enclosing all inputs.
pub fn merge_boxes(boxes: &[BBox]) -> Result<BBox> {
    let (first, rest) = boxes.split_first().ok_or(Error::Empty("box list"))?;
    let mut hull = *first;
    for b in rest {
        hull = BBox {
            x1: hull.x1.min(b.x1),
            y1: hull.y1.min(b.y1),
            x2: hull.x2.max(b.x2),
            y2: hull.y2.max(b.y2),
        };
    }
    Ok(hull)
}

/// Greedy left-to-right duplicate removal: a box is dropped iff its IoU with an
/// already kept box exceeds `iou_threshold`.
pub fn dedup_boxes(boxes: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    let mut kept: Vec<BBox> = Vec::with_capacity(boxes.len());
    for b in boxes {
        if !kept.iter().any(|k| iou(k, b) > iou_threshold) {
            kept.push(*b);
        }
    }
    kept
}

pub(crate) fn check_unit_threshold(name: &'static str, t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam {
            name,
            reason: format!("{t} is not in (0, 1]"),
        })
    }
}
