//! Axis-aligned box arithmetic.
//!
//! Boxes are half-open rectangles `[x1, x2) x [y1, y2)` in continuous pixel
//! coordinates, so a box with integer corners covers exactly
//! `(x2 - x1) * (y2 - y1)` pixels.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
struct RawBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        BoundingBox::new(raw.x1, raw.y1, raw.x2, raw.y2)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        }
    }
}

impl BoundingBox {
    /// Rejects non-finite coordinates and boxes without positive area.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

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

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the overlap with `other`, zero when disjoint or merely touching.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// The overlapping rectangle, if it has positive area.
    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        BoundingBox::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        )
        .ok()
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<BoundingBox> {
        BoundingBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Clips the box to `[0, width) x [0, height)`; `None` if nothing remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BoundingBox> {
        BoundingBox::new(
            self.x1.max(0.0),
            self.y1.max(0.0),
            self.x2.min(width),
            self.y2.min(height),
        )
        .ok()
    }
}

pub fn area(b: &BoundingBox) -> f64 {
    b.area()
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    // identical boxes must give exactly 1
    (inter / union).min(1.0)
}

/// Fraction of the ground-truth box `gt` that lies inside `prop`.
pub fn coverage(gt: &BoundingBox, prop: &BoundingBox) -> f64 {
    (gt.intersection_area(prop) / gt.area()).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BoundingBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Config(format!("score {score} outside [0, 1]")));
        }
        Ok(Self { bbox, score })
    }
}

/// Indices of `dets` sorted by descending score, ties broken by lower index.
pub fn score_order(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| match dets[b].score.total_cmp(&dets[a].score) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Greedy non-maximum suppression.
///
/// Returns the kept indices in the order they were selected. A box is
/// dropped when its IoU with any already kept box is at least `thresh`.
pub fn nms(dets: &[ScoredBox], thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(dets) {
        let suppressed = kept
            .iter()
            .any(|&k| iou(&dets[k].bbox, &dets[i].bbox) >= thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
