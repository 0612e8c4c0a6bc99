use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Network, Task};
use super::tensor::{argmax, softmax, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub target: Target,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Concatenation of `self` followed by `other`.
    pub fn union(&self, other: &LabeledDataset) -> LabeledDataset {
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        LabeledDataset { samples }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Start from the given weights instead of reinitializing them from `seed`.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
            warm_start: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

fn check_target(network: &Network, target: &Target) -> Result<()> {
    match (network.task(), target) {
        (Task::Classification, Target::Class(c)) => {
            if *c >= network.num_outputs() {
                return Err(Error::LabelOutOfRange {
                    label: *c,
                    classes: network.num_outputs(),
                });
            }
        }
        (Task::Regression, Target::Values(v)) => {
            if v.len() != network.num_outputs() {
                return Err(Error::invalid(format!(
                    "regression target has {} values, network has {} outputs",
                    v.len(),
                    network.num_outputs()
                )));
            }
        }
        _ => return Err(Error::invalid("target kind does not match network task")),
    }
    Ok(())
}

/// Loss of one sample and its gradient with respect to the raw final-layer output.
/// Cross-entropy over softmax for classifiers, mean squared error for regressors.
pub fn loss_and_grad(task: Task, raw: &[f64], target: &Target) -> (f64, Vec<f64>) {
    match (task, target) {
        (Task::Classification, Target::Class(c)) => {
            let mut p = softmax(raw);
            let loss = -p[*c].max(1e-300).ln();
            p[*c] -= 1.0;
            (loss, p)
        }
        (Task::Regression, Target::Values(t)) => {
            let n = raw.len() as f64;
            let loss = raw.iter().zip(t).map(|(y, t)| (y - t).powi(2)).sum::<f64>() / n;
            let grad = raw.iter().zip(t).map(|(y, t)| 2.0 * (y - t) / n).collect();
            (loss, grad)
        }
        _ => panic!("target kind does not match task; validate targets first"),
    }
}

/// Mean loss of the network over a dataset.
pub fn dataset_loss(network: &Network, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for s in &dataset.samples {
        check_target(network, &s.target)?;
        let (_, trace) = network.forward(&s.image)?;
        total += loss_and_grad(network.task(), trace.final_output().data(), &s.target).0;
    }
    Ok(total / dataset.len() as f64)
}

pub fn train(network: &Network, dataset: &LabeledDataset, config: &TrainConfig) -> Result<Network> {
    train_with_history(network, dataset, config).map(|(n, _)| n)
}

/// Mini-batch SGD. Returns the trained network and the mean training loss of every epoch.
pub fn train_with_history(
    network: &Network,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(Network, Vec<f64>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in &dataset.samples {
        if s.image.shape() != network.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: network.input_shape().to_vec(),
                actual: s.image.shape().to_vec(),
            });
        }
        check_target(network, &s.target)?;
    }

    let mut net = network.clone();
    if !config.warm_start {
        net.reinitialize(config.seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut grads = net.zero_grads();
    let mut history = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.iter_mut().flatten().for_each(|g| g.zero());
            for &i in batch {
                let sample = &dataset.samples[i];
                let trace = net.forward_from(0, sample.image.clone());
                let (loss, grad) =
                    loss_and_grad(net.task(), trace.final_output().data(), &sample.target);
                epoch_loss += loss;
                net.backward(&trace, &grad, &mut grads, false);
            }
            net.apply_gradients(&grads, config.learning_rate, 1.0 / batch.len() as f64);
        }
        if !net.parameters_finite() {
            return Err(Error::InvalidNetwork(
                "training diverged (non-finite parameters); lower the learning rate".into(),
            ));
        }
        history.push(epoch_loss / dataset.len() as f64);
    }
    Ok((net, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// A regression output is wrong when its mean absolute deviation exceeds this.
    pub regression_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            regression_threshold: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub ids: Vec<String>,
    /// `correct[i]` is false for error-inducing images.
    pub correct: Vec<bool>,
}

impl AccuracyReport {
    pub fn error_inducing(&self) -> Vec<&str> {
        self.ids
            .iter()
            .zip(&self.correct)
            .filter(|(_, &c)| !c)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn num_errors(&self) -> usize {
        self.correct.iter().filter(|&&c| !c).count()
    }
}

/// Whether `output` (task-level output of `forward`) counts as correct for `target`.
pub fn is_correct(task: Task, output: &[f64], target: &Target, config: &EvalConfig) -> bool {
    match (task, target) {
        (Task::Classification, Target::Class(c)) => argmax(output) == *c,
        (Task::Regression, Target::Values(t)) => {
            let mean = output.iter().zip(t).map(|(y, t)| (y - t).abs()).sum::<f64>()
                / output.len() as f64;
            mean <= config.regression_threshold
        }
        _ => false,
    }
}

pub fn evaluate(network: &Network, dataset: &LabeledDataset) -> Result<AccuracyReport> {
    evaluate_with(network, dataset, &EvalConfig::default())
}

pub fn evaluate_with(
    network: &Network,
    dataset: &LabeledDataset,
    config: &EvalConfig,
) -> Result<AccuracyReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        check_target(network, &s.target)?;
        let (out, _) = network.forward(&s.image)?;
        correct.push(is_correct(network.task(), out.data(), &s.target, config));
    }
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(AccuracyReport {
        accuracy: hits as f64 / dataset.len() as f64,
        ids: dataset.samples.iter().map(|s| s.id.clone()).collect(),
        correct,
    })
}
