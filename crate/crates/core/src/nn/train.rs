//! Mini-batch SGD with momentum on binary cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::sigmoid;
use super::network::{Network, ParamGrads};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
}

/// Learning-rate schedule over the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero.
    Cosine,
}

impl Schedule {
    /// Multiplier on the base rate after a fraction `progress` of training.
    pub fn factor(self, progress: f64) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * progress.clamp(0.0, 1.0)).cos()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `v <- momentum * v - lr * g; w <- w + v`, applied to every parameter.
pub fn sgd_step(net: &mut Network, grads: &ParamGrads, velocity: &mut ParamGrads, cfg: &TrainConfig) -> Result<()> {
    let params = net.params_mut();
    let same = |a: &ParamGrads, b: &ParamGrads| {
        a.weights.len() == b.weights.len()
            && a.weights.iter().zip(&b.weights).all(|(x, y)| x.len() == y.len())
            && a.biases.iter().zip(&b.biases).all(|(x, y)| x.len() == y.len())
    };
    if !same(params, grads) || !same(params, velocity) {
        return Err(Error::Config("gradient layout does not match the network".into()));
    }
    let groups = params
        .weights
        .iter_mut()
        .chain(params.biases.iter_mut())
        .zip(grads.weights.iter().chain(&grads.biases))
        .zip(velocity.weights.iter_mut().chain(velocity.biases.iter_mut()));
    for ((w, g), v) in groups {
        for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
            *wi += *vi;
        }
    }
    Ok(())
}

/// Numerically stable binary cross-entropy of a logit against a 0/1 target.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy of probabilities against labels.
pub fn bce(probs: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| if y { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    total / probs.len().max(1) as f64
}

/// Owns a network and its momentum buffer across SGD steps.
pub struct Trainer {
    net: Network,
    velocity: ParamGrads,
    grads: ParamGrads,
    cfg: TrainConfig,
    progress: f64,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if !net.has_sigmoid_head() || net.output_shape().len() != 1 {
            return Err(Error::Config(
                "training needs a network ending in a single sigmoid unit".into(),
            ));
        }
        let velocity = ParamGrads::zeros_like(&net);
        let grads = velocity.clone();
        Ok(Self {
            net,
            velocity,
            grads,
            cfg,
            progress: 0.0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Tells the schedule how far through training (0 to 1) the next step is.
    pub fn set_progress(&mut self, progress: f64) {
        self.progress = progress;
    }

    pub fn learning_rate(&self) -> f64 {
        self.cfg.learning_rate * self.cfg.schedule.factor(self.progress)
    }

    /// One SGD update on the mean loss of `batch`; returns the summed loss
    /// measured before the update.
    pub fn step<'a, I>(&mut self, batch: I) -> Result<f64>
    where
        I: IntoIterator<Item = (&'a Tensor, bool)>,
    {
        let head = self.net.layers().len() - 1;
        self.grads.fill(0.0);
        let mut loss = 0.0;
        let mut count = 0usize;
        for (x, label) in batch {
            let (_, cache) = self.net.forward(x)?;
            let logit = cache.layer_input(head).data()[0];
            let target = if label { 1.0 } else { 0.0 };
            loss += bce_with_logit(logit, target);
            let g = Tensor::new(Shape::flat(1), vec![sigmoid(logit) - target])?;
            self.net.accumulate_param_grads(&cache, head, &g, &mut self.grads)?;
            count += 1;
        }
        if count == 0 {
            return Ok(0.0);
        }
        self.grads.scale(1.0 / count as f64);
        let cfg = TrainConfig {
            learning_rate: self.learning_rate(),
            ..self.cfg.clone()
        };
        sgd_step(&mut self.net, &self.grads, &mut self.velocity, &cfg)?;
        Ok(loss)
    }

    pub fn into_network(self) -> Network {
        self.net
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    /// Mean training loss of every epoch.
    pub losses: Vec<f64>,
}

/// Mini-batch SGD over `samples` for `cfg.epochs` epochs, reshuffling each
/// epoch from a generator seeded with `cfg.seed`.
pub fn train(net: Network, samples: &[(Tensor, bool)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let steps = (cfg.epochs * per_epoch) as f64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            trainer.set_progress((epoch * per_epoch + b) as f64 / steps);
            total += trainer.step(chunk.iter().map(|&i| (&samples[i].0, samples[i].1)))?;
        }
        let mean = total / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        log::debug!("epoch {epoch}: loss {mean:.5}");
        losses.push(mean);
    }
    Ok(TrainOutcome {
        net: trainer.into_network(),
        losses,
    })
}
