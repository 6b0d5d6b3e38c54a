//! Subnetwork training, detection inference and the baseline-vs-PST runner.
//!
//! For every seed the runner generates scenes, splits them 50/50 by index
//! parity, pre-trains the pedestrian classifier on the training half, labels
//! the training proposals twice (plain IoU labeling and classifier-refined
//! labeling), trains one subnetwork per arm from the same initialization and
//! evaluates both on the held-out half.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{init_classifier, network_input, pretrain_classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::eval::{
    confidence_thresholds, match_detections, mr_fppi_curve, Detection, EvalCurve, Frame, FppiRange, MatchCounts,
    MATCH_IOU,
};
use crate::geometry::{nms, ScoredBox};
use crate::labeling::{
    iou_label, label_from_scores, partition, sample_minibatch, score_iou, LabeledProposals, ProposalScorer,
    ProposalSet, SetKind, Thresholds,
};
use crate::nn::{Network, Schedule, Tensor, TrainConfig, Trainer};
use crate::report::{emit_report, Report};
use crate::seeds::{scene_seed, stage_seed};
use crate::synth::{generate_scene, misleading_negative_oracle, simulate_proposals, RpnSimConfig, Scene, SceneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub rpn: RpnSimConfig,
    pub thresholds: Thresholds,
    /// Person coverage at which a low-IoU negative counts as misleading.
    pub coverage_thresh: f64,
    pub classifier: ClassifierConfig,
    pub classifier_train: TrainConfig,
    /// `batch_size` is unused here; batches come from `minibatch`.
    pub subnet_train: TrainConfig,
    /// Proposals drawn per scene and SGD step.
    pub minibatch: usize,
    pub pos_fraction: f64,
    pub nms_thresh: f64,
    pub match_iou: f64,
    /// Confidence at which the tp/fp/fn columns are counted.
    pub eval_threshold: f64,
    /// Scenes generated per seed; even indices train, odd indices test.
    pub scenes_per_seed: usize,
    pub seeds: Vec<u64>,
    pub fppi: FppiRange,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            rpn: RpnSimConfig::default(),
            thresholds: Thresholds::default(),
            coverage_thresh: 0.5,
            classifier: ClassifierConfig::default(),
            classifier_train: TrainConfig {
                learning_rate: 0.005,
                momentum: 0.9,
                epochs: 12,
                batch_size: 16,
                seed: 0,
                schedule: Schedule::Cosine,
            },
            subnet_train: TrainConfig {
                learning_rate: 0.005,
                momentum: 0.9,
                epochs: 4,
                batch_size: 16,
                seed: 0,
                schedule: Schedule::Cosine,
            },
            minibatch: 16,
            pos_fraction: 0.5,
            nms_thresh: 0.3,
            match_iou: MATCH_IOU,
            eval_threshold: 0.5,
            scenes_per_seed: 48,
            seeds: vec![1, 2, 3, 4, 5],
            fppi: FppiRange::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.rpn.validate()?;
        self.thresholds.validate()?;
        self.classifier.validate()?;
        self.classifier_train.validate()?;
        self.subnet_train.validate()?;
        self.fppi.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.scenes_per_seed < 2 {
            return Err(Error::Config("need at least two scenes per seed (one train, one test)".into()));
        }
        if self.minibatch == 0 {
            return Err(Error::Config("minibatch must be at least 1".into()));
        }
        for (name, v) in [
            ("coverage_thresh", self.coverage_thresh),
            ("pos_fraction", self.pos_fraction),
            ("nms_thresh", self.nms_thresh),
            ("match_iou", self.match_iou),
            ("eval_threshold", self.eval_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// A generated image with its simulated proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub proposals: ProposalSet,
}

/// Scene `index` of the data stream for `seed`.
pub fn generate_sample(cfg: &ExperimentConfig, seed: u64, index: usize) -> Result<Sample> {
    let s = scene_seed(seed, index as u64);
    let scene = generate_scene(&cfg.scene, &mut ChaCha8Rng::seed_from_u64(s))?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(s ^ cfg.rpn.seed, "proposals"));
    let proposals = simulate_proposals(&scene, &cfg.rpn, &mut rng)?;
    Ok(Sample { scene, proposals })
}

#[derive(Clone, Debug)]
pub struct SubnetOutcome {
    pub net: Network,
    /// Scenes whose training set held no negatives at all.
    pub scenes_without_negatives: usize,
    /// Mean loss per epoch.
    pub losses: Vec<f64>,
}

/// Trains a fresh copy of the classifier architecture on `P_t` of every
/// scene: one minibatch per scene and epoch, scenes visited in shuffled order.
pub fn train_subnetwork(
    samples: &[Sample],
    labels: &[LabeledProposals],
    ccfg: &ClassifierConfig,
    tcfg: &TrainConfig,
    minibatch: usize,
    pos_fraction: f64,
) -> Result<SubnetOutcome> {
    if samples.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "label sets",
            expected: samples.len(),
            got: labels.len(),
        });
    }
    let positives: usize = labels.iter().map(|l| l.positives.len()).sum();
    if positives == 0 {
        return Err(Error::InsufficientPositives(format!(
            "no positive proposals in {} training scenes",
            samples.len()
        )));
    }
    let scenes_without_negatives = labels.iter().filter(|l| l.refined_negatives.is_empty()).count();
    if scenes_without_negatives > 0 {
        log::warn!("{scenes_without_negatives} training scenes have no negatives");
    }
    // patches of P_t, extracted once
    let patches: Vec<Vec<Option<Tensor>>> = samples
        .iter()
        .zip(labels)
        .map(|(s, l)| {
            let mut v = vec![None; l.len()];
            for &i in &l.merged {
                v[i] = Some(network_input(&s.scene.image, &s.proposals.boxes()[i])?);
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(stage_seed(tcfg.seed, "subnet-init"));
    let net = init_classifier(ccfg, &mut init_rng)?;
    let mut trainer = Trainer::new(net, tcfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(tcfg.seed, "subnet-batches"));
    let mut order: Vec<usize> = (0..samples.len()).filter(|&i| !labels[i].merged.is_empty()).collect();
    let mut losses = Vec::with_capacity(tcfg.epochs);
    let steps = (tcfg.epochs * order.len()) as f64;
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for (k, &s) in order.iter().enumerate() {
            trainer.set_progress((epoch * order.len() + k) as f64 / steps);
            let batch = sample_minibatch(&labels[s], minibatch, pos_fraction, &mut rng)?;
            seen += batch.len();
            let items = batch.iter().map(|&i| {
                let x = patches[s][i].as_ref().expect("minibatch drawn from the training set");
                (x, labels[s].set_of(i) == SetKind::Positive)
            });
            total += trainer.step(items)?;
        }
        let mean = total / seen.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        log::debug!("subnet epoch {epoch}: loss {mean:.5}");
        losses.push(mean);
    }
    Ok(SubnetOutcome {
        net: trainer.into_network(),
        scenes_without_negatives,
        losses,
    })
}

/// Scores every proposal with the subnetwork, suppresses overlaps and returns
/// the surviving detections in descending confidence.
pub fn infer(scene: &Scene, props: &ProposalSet, subnet: &Network, nms_thresh: f64, frame: usize) -> Result<Vec<Detection>> {
    let scores = subnet.score(&scene.image, props.boxes())?;
    let scored: Vec<ScoredBox> = props
        .boxes()
        .iter()
        .zip(&scores)
        .map(|(b, &s)| ScoredBox::new(*b, s))
        .collect::<Result<_>>()?;
    Ok(nms(&scored, nms_thresh)
        .into_iter()
        .map(|i| Detection {
            bbox: scored[i].bbox,
            confidence: scored[i].score,
            frame,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Baseline,
    Pst,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::Baseline, Arm::Pst];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Pst => "pst",
        }
    }
}

/// How the raw negatives of the training scenes split against the
/// misleading-negative oracle, and how many of each an arm omitted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisleadingStats {
    pub misleading: usize,
    pub misleading_omitted: usize,
    pub clean: usize,
    pub clean_omitted: usize,
}

impl MisleadingStats {
    pub fn misleading_removed_frac(&self) -> f64 {
        frac(self.misleading_omitted, self.misleading)
    }

    pub fn clean_removed_frac(&self) -> f64 {
        frac(self.clean_omitted, self.clean)
    }
}

fn frac(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn misleading_stats(samples: &[Sample], labels: &[LabeledProposals], coverage_thresh: f64, eps_iou: f64) -> MisleadingStats {
    let mut st = MisleadingStats::default();
    for (s, l) in samples.iter().zip(labels) {
        for &i in &l.negatives {
            let bad = misleading_negative_oracle(&s.proposals.boxes()[i], &s.scene.gts, coverage_thresh, eps_iou);
            let omitted = l.omitted.binary_search(&i).is_ok();
            if bad {
                st.misleading += 1;
                st.misleading_omitted += omitted as usize;
            } else {
                st.clean += 1;
                st.clean_omitted += omitted as usize;
            }
        }
    }
    st
}

/// One arm of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub seed: u64,
    pub arm: Arm,
    pub lamr: f64,
    /// Counted at the configured evaluation threshold.
    pub counts: MatchCounts,
    pub stats: MisleadingStats,
    pub scenes_without_negatives: usize,
    pub curve: EvalCurve,
}

/// Evaluates detections of held-out frames.
pub fn evaluate(frames: &[Frame], cfg: &ExperimentConfig) -> Result<(EvalCurve, MatchCounts)> {
    let curve = mr_fppi_curve(frames, &confidence_thresholds(frames), cfg.match_iou, &cfg.fppi)?;
    let mut counts = MatchCounts::default();
    for f in frames {
        let kept: Vec<ScoredBox> = f
            .detections
            .iter()
            .filter(|d| d.score >= cfg.eval_threshold)
            .copied()
            .collect();
        let c = match_detections(&kept, &f.gts, cfg.match_iou);
        counts.tp += c.tp;
        counts.fp += c.fp;
        counts.fn_ += c.fn_;
    }
    Ok((curve, counts))
}

/// Everything one seed produces.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    /// Held-out frames per arm, in [`Arm::ALL`] order.
    pub frames: Vec<Vec<Frame>>,
    pub labels: Vec<Vec<LabeledProposals>>,
}

fn set_assignment(labels: &[LabeledProposals]) -> Vec<Vec<SetKind>> {
    labels
        .iter()
        .map(|l| (0..l.len()).map(|i| l.set_of(i)).collect())
        .collect()
}

/// Runs both arms for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..cfg.scenes_per_seed {
        let sample = generate_sample(cfg, seed, i)?;
        if i % 2 == 0 {
            train.push(sample);
        } else {
            test.push(sample);
        }
    }

    let ctrain = TrainConfig {
        seed: stage_seed(seed ^ cfg.classifier_train.seed, "classifier"),
        ..cfg.classifier_train.clone()
    };
    let train_scenes: Vec<Scene> = train.iter().map(|s| s.scene.clone()).collect();
    let classifier = pretrain_classifier(&train_scenes, &cfg.classifier, &ctrain)?;

    let th = cfg.thresholds;
    let baseline: Vec<LabeledProposals> = train
        .iter()
        .map(|s| iou_label(&s.proposals, &s.scene.gts, th.eps_iou))
        .collect::<Result<_>>()?;
    let pst: Vec<LabeledProposals> = train
        .iter()
        .map(|s| {
            let iou = score_iou(&s.proposals, &s.scene.gts);
            let (_, negatives) = partition(&iou, th.eps_iou);
            let boxes: Vec<_> = negatives.iter().map(|&i| s.proposals.boxes()[i]).collect();
            let phi = classifier.score(&s.scene.image, &boxes)?;
            label_from_scores(iou, &phi, &th)
        })
        .collect::<Result<_>>()?;
    if th.eps >= 1.0 {
        assert_eq!(
            set_assignment(&baseline),
            set_assignment(&pst),
            "eps = 1 must reproduce plain IoU labeling"
        );
    }

    let strain = TrainConfig {
        seed: stage_seed(seed ^ cfg.subnet_train.seed, "subnet"),
        ..cfg.subnet_train.clone()
    };
    let mut arms = Vec::new();
    let mut all_frames = Vec::new();
    for (arm, labels) in Arm::ALL.into_iter().zip([&baseline, &pst]) {
        let outcome = train_subnetwork(&train, labels, &cfg.classifier, &strain, cfg.minibatch, cfg.pos_fraction)?;
        let frames: Vec<Frame> = test
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let dets = infer(&s.scene, &s.proposals, &outcome.net, cfg.nms_thresh, k)?;
                Ok(Frame {
                    detections: dets
                        .iter()
                        .map(|d| ScoredBox::new(d.bbox, d.confidence))
                        .collect::<Result<_>>()?,
                    gts: s.scene.gts.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let (curve, counts) = evaluate(&frames, cfg)?;
        log::info!("seed {seed} {}: lamr {:.4}", arm.name(), curve.lamr);
        arms.push(ArmResult {
            seed,
            arm,
            lamr: curve.lamr,
            counts,
            stats: misleading_stats(&train, labels, cfg.coverage_thresh, th.eps_iou),
            scenes_without_negatives: outcome.scenes_without_negatives,
            curve,
        });
        all_frames.push(frames);
    }
    if th.eps >= 1.0 {
        assert_eq!(arms[0].curve, arms[1].curve, "eps = 1 arms must evaluate identically");
    }
    Ok(SeedRun {
        seed,
        arms,
        frames: all_frames,
        labels: vec![baseline, pst],
    })
}

/// Runs every seed in order. With an output directory the report is
/// rewritten after each seed, so a failure keeps the finished seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let mut report = Report::new(cfg.match_iou, cfg.fppi);
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, seed)?;
        report.push(run)?;
        if let Some(dir) = &cfg.out_dir {
            emit_report(&report, dir)?;
        }
    }
    Ok(report)
}
