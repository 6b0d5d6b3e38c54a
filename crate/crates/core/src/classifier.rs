//! The pedestrian-sensitive patch classifier.
//!
//! A 9-layer CNN over 64x64 grayscale patches: five 3x3 convolutions, three
//! 2x2 max-pools and one fully connected layer with a sigmoid head (ReLU and
//! sigmoid activations are fused into their layers and not counted). It is
//! pre-trained once on ground-truth crops against background crops and then
//! frozen while proposals are labeled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{coverage, BoundingBox};
use crate::labeling::ProposalScorer;
use crate::nn::{self, LayerSpec, Network, Shape, Tensor, TrainConfig};
use crate::seeds::stage_seed;
use crate::synth::Scene;

/// Side length of classifier input patches.
pub const PATCH_SIZE: usize = 64;

/// Floor on the deviation used by [`standardize`].
pub const MIN_PATCH_STD: f64 = 0.05;

/// Default filter counts of the five convolution layers.
pub const DEFAULT_CHANNELS: [usize; 5] = [8, 16, 32, 64, 64];

/// Background crops used for pre-training overlap every person by less than this.
pub const NEGATIVE_MAX_COVERAGE: f64 = 0.1;

/// Near-miss pre-training negatives keep less than this share of any person.
pub const NEAR_MISS_MAX_COVERAGE: f64 = 0.3;

/// Body-rich positives drawn around every person during pre-training.
pub const BODY_CROPS: usize = 4;

/// Near-miss negatives drawn around every person during pre-training.
pub const NEAR_MISSES: usize = 2;

/// Background negatives per person on top of those balancing the positives.
pub const EXTRA_BACKGROUND: usize = 2;

/// Body-rich pre-training positives keep at least this share of the person.
pub const POSITIVE_MIN_COVERAGE: f64 = 0.5;

/// Random background candidates scored per scene when mining hard negatives.
pub const HARD_NEGATIVE_POOL: usize = 48;

/// Mined hard negatives kept per person in the scene.
pub const HARD_NEGATIVES_PER_PERSON: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub input_size: usize,
    pub channels: [usize; 5],
    pub interpolation: Interpolation,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_size: PATCH_SIZE,
            channels: DEFAULT_CHANNELS,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size != PATCH_SIZE {
            return Err(Error::Config(format!(
                "classifier input must be {PATCH_SIZE}x{PATCH_SIZE}, got {}",
                self.input_size
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("every conv layer needs at least one filter".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(1, self.input_size, self.input_size)
    }
}

/// conv-pool-conv-pool-conv-pool-conv-conv-fc with fused activations.
pub fn default_layers(cfg: &ClassifierConfig) -> Vec<LayerSpec> {
    let [c1, c2, c3, c4, c5] = cfg.channels;
    let conv = |c| LayerSpec::conv(3, 1, 1, c);
    let pool = LayerSpec::max_pool(2, 2);
    vec![
        conv(c1),
        LayerSpec::Relu,
        pool,
        conv(c2),
        LayerSpec::Relu,
        pool,
        conv(c3),
        LayerSpec::Relu,
        pool,
        conv(c4),
        LayerSpec::Relu,
        conv(c5),
        LayerSpec::Relu,
        LayerSpec::fully_connected(1),
        LayerSpec::Sigmoid,
    ]
}

/// The classifier with all weights and biases at zero.
pub fn default_architecture(cfg: &ClassifierConfig) -> Result<Network> {
    cfg.validate()?;
    Network::zeroed(cfg.input_shape(), default_layers(cfg))
}

/// The classifier with He-initialized weights.
pub fn init_classifier<R: Rng + ?Sized>(cfg: &ClassifierConfig, rng: &mut R) -> Result<Network> {
    cfg.validate()?;
    Network::init(cfg.input_shape(), default_layers(cfg), rng)
}

/// A resampled image slice and the proposal it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub tensor: Tensor,
    pub source: usize,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Crops `bbox` (clamped to the image) and resamples it bilinearly to a
/// `size x size` patch. Sample points sit on pixel centers, so a box aligned
/// to the pixel grid at the output size is copied verbatim.
pub fn extract_patch_sized(image: &Tensor, bbox: &BoundingBox, size: usize) -> Result<Tensor> {
    let shape = image.shape();
    let (w, h) = (shape.width, shape.height);
    if shape.channels != 1 || w == 0 || h == 0 {
        return Err(Error::Config(format!("need a non-empty grayscale image, got {shape}")));
    }
    let crop = bbox.clamp_to(w as f64, h as f64).ok_or(Error::EmptyCrop {
        x1: bbox.x1(),
        y1: bbox.y1(),
        x2: bbox.x2(),
        y2: bbox.y2(),
        width: w,
        height: h,
    })?;
    // pixel index ranges touched by the crop
    let (lo_x, hi_x) = (crop.x1().floor(), crop.x2().ceil() - 1.0);
    let (lo_y, hi_y) = (crop.y1().floor(), crop.y2().ceil() - 1.0);
    let axis = |start: f64, extent: f64, lo: f64, hi: f64| -> Vec<(usize, usize, f64)> {
        (0..size)
            .map(|u| {
                let x = (start + (u as f64 + 0.5) * extent / size as f64 - 0.5).clamp(lo, hi);
                let x0 = x.floor();
                let x1 = (x0 + 1.0).min(hi);
                (x0 as usize, x1 as usize, x - x0)
            })
            .collect()
    };
    let xs = axis(crop.x1(), crop.width(), lo_x, hi_x);
    let ys = axis(crop.y1(), crop.height(), lo_y, hi_y);
    let src = image.data();
    let mut out = Vec::with_capacity(size * size);
    for &(y0, y1, fy) in &ys {
        let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
        for &(x0, x1, fx) in &xs {
            let top = lerp(r0[x0], r0[x1], fx);
            let bottom = lerp(r1[x0], r1[x1], fx);
            out.push(lerp(top, bottom, fy).clamp(0.0, 1.0));
        }
    }
    Tensor::new(Shape::new(1, size, size), out)
}

pub fn extract_patch(image: &Tensor, bbox: &BoundingBox) -> Result<Tensor> {
    extract_patch_sized(image, bbox, PATCH_SIZE)
}

/// Standardizes a patch to zero mean and unit deviation (deviation floored
/// at [`MIN_PATCH_STD`] so flat patches stay flat) before it enters a network.
pub fn standardize(patch: &Tensor) -> Tensor {
    let d = patch.data();
    let n = d.len().max(1) as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(MIN_PATCH_STD);
    let data = d.iter().map(|v| (v - mean) / std).collect();
    Tensor::from_raw(patch.shape(), data)
}

/// The standardized patch of `bbox`, as every network in this crate sees it.
pub fn network_input(image: &Tensor, bbox: &BoundingBox) -> Result<Tensor> {
    Ok(standardize(&extract_patch(image, bbox)?))
}

/// Patches for the given proposal indices.
pub fn extract_patches(image: &Tensor, boxes: &[BoundingBox], indices: &[usize]) -> Result<Vec<Patch>> {
    indices
        .iter()
        .map(|&i| {
            Ok(Patch {
                tensor: extract_patch(image, &boxes[i])?,
                source: i,
            })
        })
        .collect()
}

/// `phi_i = F(patch_i)` for every patch, order preserved.
pub fn score_patches(net: &Network, patches: &[Patch]) -> Result<Vec<f64>> {
    patches.iter().map(|p| net.predict(&standardize(&p.tensor))).collect()
}

impl ProposalScorer for Network {
    fn score(&self, image: &Tensor, boxes: &[BoundingBox]) -> Result<Vec<f64>> {
        boxes
            .iter()
            .map(|b| self.predict(&network_input(image, b)?))
            .collect()
    }
}

/// A random box shaped like the scene's proposals, clamped to the image.
fn random_box<R: Rng + ?Sized>(image: Shape, rng: &mut R) -> Option<BoundingBox> {
    let (w, h) = (image.width as f64, image.height as f64);
    let bh = rng.random_range(24.0..(0.5 * h).max(25.0));
    let bw = (bh * rng.random_range(0.3..0.7)).min(w);
    let x1 = rng.random_range(0.0..=(w - bw));
    let y1 = rng.random_range(0.0..=(h - bh));
    BoundingBox::new(x1, y1, x1 + bw, y1 + bh).ok()
}

/// A proposal-like box around `gt`: rescaled by up to 2x with a jittered
/// aspect ratio and its center moved by up to `reach` of the person's size.
fn around<R: Rng + ?Sized>(gt: &BoundingBox, image: Shape, reach: f64, rng: &mut R) -> Option<BoundingBox> {
    let s = rng.random_range(0.7f64.ln()..2f64.ln()).exp();
    let aspect = rng.random_range(0.8..1.25);
    let (bw, bh) = (s * aspect * gt.width(), s * gt.height());
    let (cx, cy) = gt.center();
    let cx = cx + rng.random_range(-reach..reach) * gt.width();
    let cy = cy + rng.random_range(-reach..reach) * gt.height();
    BoundingBox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0)
        .ok()?
        .clamp_to(image.width as f64, image.height as f64)
}

fn max_coverage(gts: &[BoundingBox], b: &BoundingBox) -> f64 {
    gts.iter().map(|g| coverage(g, b)).fold(0.0, f64::max)
}

/// Pre-training samples. Per person the positives are its ground-truth crop
/// and [`BODY_CROPS`] body-rich boxes around it (coverage at least
/// [`POSITIVE_MIN_COVERAGE`]); the negatives are [`NEAR_MISSES`] boxes around
/// the person holding less than [`NEAR_MISS_MAX_COVERAGE`] of anyone, topped
/// up with background crops (coverage below [`NEGATIVE_MAX_COVERAGE`] for
/// every person) to balance the positives plus [`EXTRA_BACKGROUND`].
pub fn pretraining_samples<R: Rng + ?Sized>(scenes: &[Scene], rng: &mut R) -> Result<Vec<(Tensor, bool)>> {
    let mut samples = Vec::new();
    for scene in scenes {
        let shape = scene.image.shape();
        let gts = &scene.gts;
        let mut wanted_background = 0usize;
        for gt in gts {
            samples.push((network_input(&scene.image, gt)?, true));
            let mut positives = 1;
            for _ in 0..BODY_CROPS {
                let body = (0..100).find_map(|_| {
                    around(gt, shape, 1.0, rng).filter(|b| coverage(gt, b) >= POSITIVE_MIN_COVERAGE)
                });
                if let Some(b) = body {
                    samples.push((network_input(&scene.image, &b)?, true));
                    positives += 1;
                }
            }
            let mut near_misses = 0;
            for _ in 0..NEAR_MISSES {
                let near = (0..100).find_map(|_| {
                    around(gt, shape, 1.0, rng).filter(|b| max_coverage(gts, b) < NEAR_MISS_MAX_COVERAGE)
                });
                if let Some(b) = near {
                    samples.push((network_input(&scene.image, &b)?, false));
                    near_misses += 1;
                }
            }
            wanted_background += (positives + EXTRA_BACKGROUND).saturating_sub(near_misses);
        }
        let mut tries = 0;
        while wanted_background > 0 && tries < 1000 * gts.len().max(1) {
            tries += 1;
            let Some(b) = random_box(shape, rng) else {
                continue;
            };
            if max_coverage(gts, &b) < NEGATIVE_MAX_COVERAGE {
                samples.push((network_input(&scene.image, &b)?, false));
                wanted_background -= 1;
            }
        }
    }
    Ok(samples)
}

/// Background crops that `net` mistakes for people most confidently: per
/// scene, the best-scored [`HARD_NEGATIVES_PER_PERSON`] per person out of
/// [`HARD_NEGATIVE_POOL`] random candidates.
pub fn mine_hard_negatives<R: Rng + ?Sized>(net: &Network, scenes: &[Scene], rng: &mut R) -> Result<Vec<(Tensor, bool)>> {
    let mut out = Vec::new();
    for scene in scenes {
        let shape = scene.image.shape();
        let mut scored = Vec::with_capacity(HARD_NEGATIVE_POOL);
        let mut tries = 0;
        while scored.len() < HARD_NEGATIVE_POOL && tries < 1000 {
            tries += 1;
            let Some(b) = random_box(shape, rng) else {
                continue;
            };
            if max_coverage(&scene.gts, &b) < NEGATIVE_MAX_COVERAGE {
                let x = network_input(&scene.image, &b)?;
                scored.push((net.predict(&x)?, x));
            }
        }
        // stable sort keeps draw order among equal scores
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let keep = HARD_NEGATIVES_PER_PERSON * scene.gts.len();
        out.extend(scored.into_iter().take(keep).map(|(_, x)| (x, false)));
    }
    Ok(out)
}

/// Trains the classifier on `scenes`: half of the epochs on
/// [`pretraining_samples`], then the rest with mined hard negatives added.
/// Deterministic in `tcfg.seed`.
pub fn pretrain_classifier(scenes: &[Scene], cfg: &ClassifierConfig, tcfg: &TrainConfig) -> Result<Network> {
    cfg.validate()?;
    tcfg.validate()?;
    let people: usize = scenes.iter().map(|s| s.gts.len()).sum();
    if people == 0 {
        return Err(Error::InsufficientPositives(format!(
            "{} scenes hold no pedestrians",
            scenes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(tcfg.seed, "classifier-data"));
    let mut samples = pretraining_samples(scenes, &mut rng)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(stage_seed(tcfg.seed, "classifier-init"));
    let net = init_classifier(cfg, &mut init_rng)?;
    let outcome = if tcfg.epochs < 2 {
        nn::train(net, &samples, tcfg)?
    } else {
        let first = TrainConfig {
            epochs: tcfg.epochs / 2,
            ..tcfg.clone()
        };
        let warm = nn::train(net, &samples, &first)?;
        samples.extend(mine_hard_negatives(&warm.net, scenes, &mut rng)?);
        let second = TrainConfig {
            epochs: tcfg.epochs - first.epochs,
            seed: tcfg.seed ^ 1,
            ..tcfg.clone()
        };
        nn::train(warm.net, &samples, &second)?
    };
    log::info!(
        "classifier pre-trained on {} patches, final loss {:.4}",
        samples.len(),
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(outcome.net)
}
