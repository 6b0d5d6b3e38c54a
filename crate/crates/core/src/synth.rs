//! Synthetic grayscale street scenes and a stand-in for region-proposal
//! output.
//!
//! Pedestrians are drawn as simple glyphs (head disc, torso, arms, legs) on a
//! textured background with look-alike clutter such as lamp posts. The
//! proposal simulator jitters ground-truth boxes, optionally emits a shifted
//! partial-body crop whose IoU falls under the positive threshold while it
//! still covers most of the person, and scatters background boxes.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{coverage, iou, BoundingBox};
use crate::labeling::ProposalSet;
use crate::nn::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of pedestrians per scene.
    pub pedestrians: [usize; 2],
    /// Inclusive range of pedestrian box heights in pixels.
    pub pedestrian_height: [f64; 2],
    /// Inclusive range of distractor shapes per scene.
    pub clutter: [usize; 2],
    /// Contrast of distractors against the background.
    pub clutter_intensity: f64,
    pub occlusion_prob: f64,
    /// Amplitude of per-pixel uniform noise.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            pedestrians: [1, 4],
            pedestrian_height: [48.0, 96.0],
            clutter: [4, 8],
            clutter_intensity: 0.35,
            occlusion_prob: 0.3,
            noise: 0.03,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene config: {m}")));
        if self.width < 16 || self.height < 16 {
            return bad("image must be at least 16x16");
        }
        if self.pedestrians[0] > self.pedestrians[1] || self.clutter[0] > self.clutter[1] {
            return bad("count ranges must be ordered");
        }
        let [hmin, hmax] = self.pedestrian_height;
        if !(hmin >= 4.0 && hmin <= hmax && hmax <= self.height as f64) {
            return bad("pedestrian height range must be ordered and fit the image");
        }
        if hmax * PED_ASPECT > self.width as f64 {
            return bad("pedestrians do not fit the image width");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad("occlusion probability outside [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.clutter_intensity) || !(0.0..=0.5).contains(&self.noise) {
            return bad("intensities must lie in [0, 0.5]");
        }
        Ok(())
    }
}

/// Width-to-height ratio of a pedestrian box.
pub const PED_ASPECT: f64 = 0.41;

/// Largest IoU allowed between two ground-truth boxes of one scene.
pub const MAX_GT_OVERLAP: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Single-channel image with values in `[0, 1]`.
    pub image: Tensor,
    pub gts: Vec<BoundingBox>,
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn fill_rect(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, v: f64) {
        let xs = x1.max(0.0).round() as usize..(x2.min(self.w as f64).round() as usize);
        let ys = y1.max(0.0).round() as usize..(y2.min(self.h as f64).round() as usize);
        for y in ys {
            for x in xs.clone() {
                self.px[y * self.w + x] = v;
            }
        }
    }

    fn fill_disc(&mut self, cx: f64, cy: f64, r: f64, v: f64) {
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(self.h);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(self.w);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.px[y * self.w + x] = v;
                }
            }
        }
    }
}

fn draw_pedestrian(c: &mut Canvas, b: &BoundingBox, v: f64) {
    let (x, y, w, h) = (b.x1(), b.y1(), b.width(), b.height());
    c.fill_disc(x + 0.5 * w, y + 0.11 * h, 0.1 * h, v);
    c.fill_rect(x + 0.25 * w, y + 0.2 * h, x + 0.75 * w, y + 0.56 * h, v);
    c.fill_rect(x, y + 0.22 * h, x + 0.16 * w, y + 0.5 * h, v);
    c.fill_rect(x + 0.84 * w, y + 0.22 * h, x + w, y + 0.5 * h, v);
    c.fill_rect(x + 0.27 * w, y + 0.56 * h, x + 0.46 * w, y + h, v);
    c.fill_rect(x + 0.54 * w, y + 0.56 * h, x + 0.73 * w, y + h, v);
}

fn range_usize<R: Rng + ?Sized>(rng: &mut R, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

fn range_f64<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Renders one scene. Identical generator state gives an identical scene.
pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let base = range_f64(rng, 0.35, 0.55);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                range_f64(rng, 0.01, 0.05),
                range_f64(rng, 0.01, 0.05),
                range_f64(rng, 0.0, 2.0 * PI),
                range_f64(rng, 0.02, 0.06),
            )
        })
        .collect();
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).cos())
                .sum();
            px.push(base + t);
        }
    }
    let mut canvas = Canvas { w, h, px };

    let contrast = |rng: &mut R, amount: f64| {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        (base + sign * amount).clamp(0.0, 1.0)
    };

    let [hmin, hmax] = cfg.pedestrian_height;
    for _ in 0..range_usize(rng, cfg.clutter) {
        let k = cfg.clutter_intensity * range_f64(rng, 0.7, 1.0);
        let v = contrast(rng, k);
        if rng.random_bool(0.5) {
            // lamp post: a tall thin pole with a small head on top
            let ph = range_f64(rng, hmin, hmax * 1.3).min(h as f64 - 1.0);
            let pw = range_f64(rng, 3.0, 7.0);
            let x = range_f64(rng, 0.0, w as f64 - pw);
            let y = range_f64(rng, 0.0, h as f64 - ph);
            canvas.fill_rect(x, y + 0.08 * ph, x + pw, y + ph, v);
            canvas.fill_rect(x - pw, y, x + 2.0 * pw, y + 0.08 * ph, v);
        } else {
            let rw = range_f64(rng, 10.0, 50.0);
            let rh = range_f64(rng, 10.0, 50.0);
            let x = range_f64(rng, 0.0, w as f64 - rw);
            let y = range_f64(rng, 0.0, h as f64 - rh);
            canvas.fill_rect(x, y, x + rw, y + rh, v);
        }
    }

    let wanted = range_usize(rng, cfg.pedestrians);
    let mut gts: Vec<BoundingBox> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while gts.len() < wanted && attempts < 1000 {
        attempts += 1;
        let ph = range_f64(rng, hmin, hmax).round();
        let pw = (ph * PED_ASPECT).round().max(2.0);
        let x = rng.random_range(0..=(w - pw as usize)) as f64;
        let y = rng.random_range(0..=(h - ph as usize)) as f64;
        let b = BoundingBox::new(x, y, x + pw, y + ph)?;
        if gts.iter().all(|g| iou(g, &b) < MAX_GT_OVERLAP) {
            gts.push(b);
        }
    }
    for b in &gts {
        let k = range_f64(rng, 0.3, 0.45);
        let v = contrast(rng, k);
        draw_pedestrian(&mut canvas, b, v);
        if rng.random_bool(cfg.occlusion_prob) {
            // a background-toned occluder hides the lower body or one side
            let k = range_f64(rng, 0.0, 0.15);
            let ov = contrast(rng, k);
            match rng.random_range(0..4) {
                0 | 1 => {
                    let top = b.y2() - range_f64(rng, 0.3, 0.5) * b.height();
                    canvas.fill_rect(b.x1() - 2.0, top, b.x2() + 2.0, b.y2(), ov);
                }
                side => {
                    let cut = range_f64(rng, 0.35, 0.5) * b.width();
                    let (x1, x2) = if side == 2 {
                        (b.x1() - 2.0, b.x1() + cut)
                    } else {
                        (b.x2() - cut, b.x2() + 2.0)
                    };
                    canvas.fill_rect(x1, b.y1() - 2.0, x2, b.y2() + 2.0, ov);
                }
            }
        }
    }

    for v in &mut canvas.px {
        let n = if cfg.noise > 0.0 {
            rng.random_range(-cfg.noise..cfg.noise)
        } else {
            0.0
        };
        *v = (*v + n).clamp(0.0, 1.0);
    }
    let image = Tensor::new(Shape::new(1, h, w), canvas.px)?;
    Ok(Scene { image, gts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnSimConfig {
    /// Jittered copies emitted per ground-truth box.
    pub jitter_per_gt: usize,
    /// Standard deviation of the center shift, as a fraction of box size.
    pub sigma_shift: f64,
    /// Standard deviation of the log scale change.
    pub sigma_scale: f64,
    /// Probability that a ground truth also yields a shifted partial-body crop.
    pub partial_crop_prob: f64,
    /// Uniform background boxes per image.
    pub background: usize,
    pub seed: u64,
}

impl Default for RpnSimConfig {
    fn default() -> Self {
        Self {
            jitter_per_gt: 8,
            sigma_shift: 0.08,
            sigma_scale: 0.08,
            partial_crop_prob: 0.6,
            background: 24,
            seed: 0,
        }
    }
}

impl RpnSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.partial_crop_prob) {
            return Err(Error::Config("partial crop probability outside [0, 1]".into()));
        }
        if !(self.sigma_shift >= 0.0 && self.sigma_scale >= 0.0)
            || !self.sigma_shift.is_finite()
            || !self.sigma_scale.is_finite()
        {
            return Err(Error::Config("jitter scales must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Keeps a fraction `c` of `gt` along one axis and extends the box outward
/// past that side by `e > 2c - 1`, so coverage is `c` while the IoU `c / (1 + e)`
/// stays below one half.
fn partial_crop<R: Rng + ?Sized>(gt: &BoundingBox, w: f64, h: f64, rng: &mut R) -> Option<BoundingBox> {
    let c = range_f64(rng, 0.55, 0.8);
    let e = 2.0 * c - 1.0 + range_f64(rng, 0.1, 0.3);
    let mut dirs = [(0.0, -1.0), (0.0, 1.0), (-1.0, 0.0), (1.0, 0.0)];
    dirs.shuffle(rng);
    let (gw, gh) = (gt.width(), gt.height());
    dirs.iter().find_map(|&(dx, dy): &(f64, f64)| {
        let (cut, grow) = (1.0 - c, e);
        let x1 = gt.x1() + gw * if dx > 0.0 { cut } else if dx < 0.0 { -grow } else { 0.0 };
        let x2 = gt.x2() + gw * if dx > 0.0 { grow } else if dx < 0.0 { -cut } else { 0.0 };
        let y1 = gt.y1() + gh * if dy > 0.0 { cut } else if dy < 0.0 { -grow } else { 0.0 };
        let y2 = gt.y2() + gh * if dy > 0.0 { grow } else if dy < 0.0 { -cut } else { 0.0 };
        let cand = BoundingBox::new(x1, y1, x2, y2).ok()?.clamp_to(w, h)?;
        (coverage(gt, &cand) >= 0.5 && iou(gt, &cand) < 0.5).then_some(cand)
    })
}

/// Emulates region proposals for `scene`.
pub fn simulate_proposals<R: Rng + ?Sized>(scene: &Scene, cfg: &RpnSimConfig, rng: &mut R) -> Result<ProposalSet> {
    cfg.validate()?;
    let shape = scene.image.shape();
    let (w, h) = (shape.width as f64, shape.height as f64);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut boxes = Vec::new();
    for gt in &scene.gts {
        for _ in 0..cfg.jitter_per_gt {
            let dx = cfg.sigma_shift * gt.width() * std_normal.sample(rng);
            let dy = cfg.sigma_shift * gt.height() * std_normal.sample(rng);
            let nw = gt.width() * (cfg.sigma_scale * std_normal.sample(rng)).exp();
            let nh = gt.height() * (cfg.sigma_scale * std_normal.sample(rng)).exp();
            let x1 = gt.x1() + dx - 0.5 * (nw - gt.width());
            let y1 = gt.y1() + dy - 0.5 * (nh - gt.height());
            if let Some(b) = BoundingBox::new(x1, y1, x1 + nw, y1 + nh)
                .ok()
                .and_then(|b| b.clamp_to(w, h))
            {
                boxes.push(b);
            }
        }
        if cfg.partial_crop_prob > 0.0 && rng.random_bool(cfg.partial_crop_prob) {
            if let Some(b) = partial_crop(gt, w, h, rng) {
                boxes.push(b);
            }
        }
    }
    for _ in 0..cfg.background {
        let bh = range_f64(rng, 24.0, (0.5 * h).max(25.0));
        let bw = (bh * range_f64(rng, 0.3, 0.7)).min(w);
        let x1 = range_f64(rng, 0.0, w - bw);
        let y1 = range_f64(rng, 0.0, h - bh);
        boxes.push(BoundingBox::new(x1, y1, x1 + bw, y1 + bh)?);
    }
    Ok(ProposalSet::new(boxes))
}

/// Ground-truth test for a misleading negative: the proposal holds at least
/// `coverage_thresh` of some person yet its best IoU is below `eps_iou`.
pub fn misleading_negative_oracle(
    prop: &BoundingBox,
    gts: &[BoundingBox],
    coverage_thresh: f64,
    eps_iou: f64,
) -> bool {
    let max_cov = gts.iter().map(|g| coverage(g, prop)).fold(0.0, f64::max);
    let max_iou = gts.iter().map(|g| iou(g, prop)).fold(0.0, f64::max);
    max_cov >= coverage_thresh && max_iou < eps_iou
}
