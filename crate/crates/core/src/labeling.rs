//! Proposal labeling for the second detection stage.
//!
//! Proposals are split by their best IoU against ground truth into
//! positives (`IoU >= eps_iou`) and raw negatives. Every raw negative is then
//! re-scored by a frozen pedestrian-sensitive classifier: negatives scoring
//! `phi < eps` stay as refined negatives, the rest are omitted from training
//! altogether. Omitted proposals are never promoted to positives, their
//! localization is too poor for that.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::nn::Tensor;

/// Ordered proposals `p_1 .. p_n` of one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProposalSet(Vec<BoundingBox>);

impl ProposalSet {
    pub fn new(boxes: Vec<BoundingBox>) -> Self {
        Self(boxes)
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_boxes(self) -> Vec<BoundingBox> {
        self.0
    }
}

impl From<Vec<BoundingBox>> for ProposalSet {
    fn from(v: Vec<BoundingBox>) -> Self {
        Self(v)
    }
}

/// Best IoU of each proposal over all ground truths and the matching index.
#[derive(Clone, Debug, PartialEq)]
pub struct IoUScores {
    pub scores: Vec<f64>,
    pub matched: Vec<Option<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Positive IoU threshold; `IoU >= eps_iou` is positive.
    pub eps_iou: f64,
    /// Classifier threshold; negatives with `phi < eps` are kept.
    pub eps: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { eps_iou: 0.5, eps: 0.5 }
    }
}

impl Thresholds {
    pub fn new(eps_iou: f64, eps: f64) -> Result<Self> {
        let t = Self { eps_iou, eps };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps_iou", self.eps_iou), ("eps", self.eps)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// The same IoU threshold with classifier pruning disabled.
    pub fn baseline(&self) -> Self {
        Self {
            eps_iou: self.eps_iou,
            eps: 1.0,
        }
    }
}

/// Which training set a proposal ended up in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetKind {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
    Omitted,
}

/// Outcome of labeling one image. Index lists point into the proposal set
/// and are kept in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledProposals {
    pub iou: IoUScores,
    /// `P+`
    pub positives: Vec<usize>,
    /// `P-`, before refinement.
    pub negatives: Vec<usize>,
    /// `P-_n`
    pub refined_negatives: Vec<usize>,
    /// `O`
    pub omitted: Vec<usize>,
    /// `P_t = P+ ∪ P-_n`
    pub merged: Vec<usize>,
    /// Classifier score of every raw negative, `None` for positives.
    pub phi: Vec<Option<f64>>,
}

/// One line of a label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub index: usize,
    pub set: SetKind,
    pub iou: f64,
    pub phi: Option<f64>,
}

impl LabeledProposals {
    pub fn len(&self) -> usize {
        self.iou.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set_of(&self, idx: usize) -> SetKind {
        if self.positives.binary_search(&idx).is_ok() {
            SetKind::Positive
        } else if self.refined_negatives.binary_search(&idx).is_ok() {
            SetKind::Negative
        } else {
            SetKind::Omitted
        }
    }

    pub fn records(&self) -> Vec<LabelRecord> {
        (0..self.len())
            .map(|i| LabelRecord {
                index: i,
                set: self.set_of(i),
                iou: self.iou.scores[i],
                phi: self.phi[i],
            })
            .collect()
    }

    /// Rebuilds the record from a label file.
    pub fn from_records(records: &[LabelRecord]) -> Result<Self> {
        let n = records.len();
        let mut scores = vec![0.0; n];
        let mut phi = vec![None; n];
        let (mut pos, mut negn, mut omitted) = (Vec::new(), Vec::new(), Vec::new());
        let mut seen = vec![false; n];
        for r in records {
            if r.index >= n || seen[r.index] {
                return Err(Error::Config(format!("label index {} duplicated or out of range", r.index)));
            }
            seen[r.index] = true;
            scores[r.index] = r.iou;
            phi[r.index] = r.phi;
            match r.set {
                SetKind::Positive => pos.push(r.index),
                SetKind::Negative => negn.push(r.index),
                SetKind::Omitted => omitted.push(r.index),
            }
        }
        pos.sort_unstable();
        negn.sort_unstable();
        omitted.sort_unstable();
        let mut negatives: Vec<usize> = negn.iter().chain(&omitted).copied().collect();
        negatives.sort_unstable();
        let merged = merge(&pos, &negn)?;
        Ok(Self {
            iou: IoUScores {
                scores,
                matched: vec![None; n],
            },
            positives: pos,
            negatives,
            refined_negatives: negn,
            omitted,
            merged,
            phi,
        })
    }
}

/// Best IoU of each proposal against all ground truths; the lowest ground
/// truth index wins ties. Without ground truth every score is zero.
pub fn score_iou(props: &ProposalSet, gts: &[BoundingBox]) -> IoUScores {
    let (scores, matched) = props
        .boxes()
        .iter()
        .map(|p| {
            gts.iter()
                .enumerate()
                .fold((0.0, None), |(best, arg), (gi, g)| {
                    let v = iou(p, g);
                    if arg.is_none() || v > best {
                        (v, Some(gi))
                    } else {
                        (best, arg)
                    }
                })
        })
        .unzip();
    IoUScores { scores, matched }
}

/// Splits proposal indices into `{IoU >= eps_iou}` and `{IoU < eps_iou}`.
pub fn partition(scores: &IoUScores, eps_iou: f64) -> (Vec<usize>, Vec<usize>) {
    (0..scores.scores.len()).partition(|&i| scores.scores[i] >= eps_iou)
}

/// Keeps the raw negatives whose classifier score is strictly below `eps`;
/// returns `(refined negatives, omitted)`.
pub fn refine_negatives(negatives: &[usize], phi: &[f64], eps: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if negatives.len() != phi.len() {
        return Err(Error::LengthMismatch {
            what: "classifier scores",
            expected: negatives.len(),
            got: phi.len(),
        });
    }
    let (keep, omit): (Vec<_>, Vec<_>) = negatives.iter().zip(phi).partition(|(_, &p)| p < eps);
    Ok((
        keep.into_iter().map(|(&i, _)| i).collect(),
        omit.into_iter().map(|(&i, _)| i).collect(),
    ))
}

/// Sorted union of two disjoint index lists.
pub fn merge(positives: &[usize], refined_negatives: &[usize]) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = positives.iter().chain(refined_negatives).copied().collect();
    out.sort_unstable();
    if let Some(w) = out.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Overlap(w[0]));
    }
    Ok(out)
}

/// Scores image slices for the classifier step.
pub trait ProposalScorer {
    /// One score in `[0, 1]` per box, in order.
    fn score(&self, image: &Tensor, boxes: &[BoundingBox]) -> Result<Vec<f64>>;
}

impl<F> ProposalScorer for F
where
    F: Fn(&Tensor, &BoundingBox) -> f64,
{
    fn score(&self, image: &Tensor, boxes: &[BoundingBox]) -> Result<Vec<f64>> {
        Ok(boxes.iter().map(|b| self(image, b)).collect())
    }
}

/// Assembles the labeling record from IoU scores and the classifier scores
/// of the raw negatives (in ascending index order).
pub fn label_from_scores(iou: IoUScores, negative_phi: &[f64], th: &Thresholds) -> Result<LabeledProposals> {
    th.validate()?;
    let (positives, negatives) = partition(&iou, th.eps_iou);
    let (refined_negatives, omitted) = refine_negatives(&negatives, negative_phi, th.eps)?;
    let merged = merge(&positives, &refined_negatives)?;
    let mut phi = vec![None; iou.scores.len()];
    for (&i, &p) in negatives.iter().zip(negative_phi) {
        phi[i] = Some(p);
    }
    Ok(LabeledProposals {
        iou,
        positives,
        negatives,
        refined_negatives,
        omitted,
        merged,
        phi,
    })
}

/// Plain IoU labeling: every raw negative is kept and no scores are recorded.
pub fn iou_label(props: &ProposalSet, gts: &[BoundingBox], eps_iou: f64) -> Result<LabeledProposals> {
    let iou = score_iou(props, gts);
    let (_, negatives) = partition(&iou, eps_iou);
    let th = Thresholds::new(eps_iou, 1.0)?;
    let mut lp = label_from_scores(iou, &vec![0.0; negatives.len()], &th)?;
    lp.phi.fill(None);
    Ok(lp)
}

/// Full labeling of one image: IoU split, classifier scoring of the raw
/// negatives' image slices, refinement and merge.
pub fn pst_label<S>(
    image: &Tensor,
    props: &ProposalSet,
    gts: &[BoundingBox],
    classifier: &S,
    th: &Thresholds,
) -> Result<LabeledProposals>
where
    S: ProposalScorer + ?Sized,
{
    th.validate()?;
    let iou = score_iou(props, gts);
    let (_, negatives) = partition(&iou, th.eps_iou);
    let boxes: Vec<BoundingBox> = negatives.iter().map(|&i| props.boxes()[i]).collect();
    let phi = classifier.score(image, &boxes)?;
    label_from_scores(iou, &phi, th)
}

/// Draws up to `ceil(batch * pos_fraction)` positives without replacement,
/// fills the rest of the batch from refined negatives, and never touches
/// omitted proposals. Positives come first in the returned list.
pub fn sample_minibatch<R: Rng + ?Sized>(
    lp: &LabeledProposals,
    batch: usize,
    pos_fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch == 0 || !(0.0..=1.0).contains(&pos_fraction) {
        return Err(Error::Config(format!(
            "minibatch needs batch >= 1 and pos_fraction in [0, 1], got {batch} / {pos_fraction}"
        )));
    }
    if lp.merged.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let pos_quota = ((batch as f64 * pos_fraction).ceil() as usize).min(batch);
    let n_pos = pos_quota.min(lp.positives.len());
    let n_neg = (batch - n_pos).min(lp.refined_negatives.len());
    let mut out: Vec<usize> = index::sample(rng, lp.positives.len(), n_pos)
        .into_iter()
        .map(|i| lp.positives[i])
        .collect();
    let mut neg: Vec<usize> = index::sample(rng, lp.refined_negatives.len(), n_neg)
        .into_iter()
        .map(|i| lp.refined_negatives[i])
        .collect();
    out.append(&mut neg);
    Ok(out)
}
