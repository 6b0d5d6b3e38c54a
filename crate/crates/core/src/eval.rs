//! Miss rate against false positives per image.
//!
//! Detections are matched greedily to ground truth at IoU 0.5 by default.
//! Sweeping a confidence threshold gives the MR/FPPI trade-off curve, which
//! is summarised by the log-average miss rate: the geometric mean of the miss
//! rate sampled at log-spaced FPPI reference points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, score_order, BoundingBox, ScoredBox};

/// Default IoU needed for a detection to hit a ground truth.
pub const MATCH_IOU: f64 = 0.5;

/// Miss rates are floored here before taking logs.
pub const MR_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub frame: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Greedy one-to-one matching in descending confidence order. Returns, for
/// each detection in that order, whether it hit a ground truth.
pub fn match_flags(dets: &[ScoredBox], gts: &[BoundingBox], iou_thresh: f64) -> Vec<(usize, bool)> {
    let mut taken = vec![false; gts.len()];
    score_order(dets)
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(&dets[d].bbox, gt);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (d, best.is_some())
        })
        .collect()
}

pub fn match_detections(dets: &[ScoredBox], gts: &[BoundingBox], iou_thresh: f64) -> MatchCounts {
    let tp = match_flags(dets, gts, iou_thresh).iter().filter(|(_, hit)| *hit).count();
    MatchCounts {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
    }
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frame {
    pub detections: Vec<ScoredBox>,
    pub gts: Vec<BoundingBox>,
}

/// FPPI interval and number of log-spaced reference points for the
/// log-average miss rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FppiRange {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for FppiRange {
    fn default() -> Self {
        Self {
            lo: 1e-2,
            hi: 1.0,
            points: 9,
        }
    }
}

impl FppiRange {
    /// The wider `[1e-3, 1]` range used for MR/FPPI plots.
    pub fn wide() -> Self {
        Self {
            lo: 1e-3,
            ..Self::default()
        }
    }

    /// `[1e-4, 1e2]`, a common preset for crowded benchmarks.
    pub fn caltech() -> Self {
        Self {
            lo: 1e-4,
            hi: 1e2,
            points: 9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo > 0.0 && self.lo < self.hi && self.hi.is_finite()) || self.points == 0 {
            return Err(Error::Config(format!(
                "FPPI range must be positive and increasing with at least one point, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn references(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.lo];
        }
        let (a, b) = (self.lo.log10(), self.hi.log10());
        (0..self.points)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / (self.points - 1) as f64))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub mr: f64,
    pub counts: MatchCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    /// Sorted by ascending FPPI, i.e. descending threshold.
    pub points: Vec<CurvePoint>,
    pub lamr: f64,
}

/// Every distinct detection confidence, highest first.
pub fn confidence_thresholds(frames: &[Frame]) -> Vec<f64> {
    let mut t: Vec<f64> = frames
        .iter()
        .flat_map(|f| f.detections.iter().map(|d| d.score))
        .collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// Log-average miss rate of `points` (sorted by FPPI). Each reference takes
/// the curve point with the largest FPPI not exceeding it; a reference below
/// the whole curve falls back to the empty detector (miss rate 1).
pub fn log_average_miss_rate(points: &[CurvePoint], range: &FppiRange) -> f64 {
    let refs = range.references();
    let sum: f64 = refs
        .iter()
        .map(|&r| {
            let mr = points
                .iter()
                .take_while(|p| p.fppi <= r)
                .last()
                .map_or(1.0, |p| p.mr);
            mr.max(MR_FLOOR).ln()
        })
        .sum();
    (sum / refs.len() as f64).exp()
}

/// MR/FPPI pairs for each confidence threshold (detections with
/// `confidence >= threshold` count) and their log-average miss rate.
pub fn mr_fppi_curve(frames: &[Frame], thresholds: &[f64], iou_thresh: f64, range: &FppiRange) -> Result<EvalCurve> {
    if frames.is_empty() {
        return Err(Error::NoFrames);
    }
    range.validate()?;
    let mut thresholds = thresholds.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    // greedy matching is prefix-consistent, so match once per frame
    let flagged: Vec<Vec<(f64, bool)>> = frames
        .iter()
        .map(|f| {
            match_flags(&f.detections, &f.gts, iou_thresh)
                .into_iter()
                .map(|(d, hit)| (f.detections[d].score, hit))
                .collect()
        })
        .collect();
    let total_gt: usize = frames.iter().map(|f| f.gts.len()).sum();
    let n = frames.len() as f64;
    let points: Vec<CurvePoint> = thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp) = (0, 0);
            for frame in &flagged {
                for &(_, hit) in frame.iter().take_while(|(s, _)| *s >= t) {
                    if hit {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let fn_ = total_gt - tp;
            CurvePoint {
                threshold: t,
                fppi: fp as f64 / n,
                mr: if total_gt == 0 { 0.0 } else { fn_ as f64 / total_gt as f64 },
                counts: MatchCounts { tp, fp, fn_ },
            }
        })
        .collect();
    let lamr = log_average_miss_rate(&points, range);
    Ok(EvalCurve { points, lamr })
}
