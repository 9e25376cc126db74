//! Adaptive ensemble distillation with learnable teacher weights, teacher
//! removal, and the classic single-target baseline.
//!
//! The student weights `w` are trained on the training split against
//! `alpha * CE + (1 - alpha) * sum_i lhat_i * KL(q_i || p_w)` with the teacher
//! weights held fixed. Every `v` epochs the raw weights `lambda` take one
//! gradient step on the same loss evaluated on the validation split, with the
//! student frozen. `lhat` is the Gumbel reparameterization of `lambda`:
//! `gamma = softmax((-lambda + gs) / tau)`, `lhat = softmax(-gamma)`.

mod gumbel;
mod removal;

pub use gumbel::{gumbel_noise, gumbel_unimportance, gumbel_unimportance_with_noise, reparam_importance};
pub use removal::{
    classic_kd_train, leave_one_out_removal, lightts_removal, ClassicOutcome, DistillOutcome, RemovalStep, RunRecord,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kl_divergence, Graph, Optimizer, OptimizerKind, Tensor, LOG_FLOOR};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{argmax, build_student, StudentNetwork, StudentSetting, DEFAULT_FILTERS};
use crate::teachers::TeacherDistributions;
use crate::training::{train_epoch, Rows};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub tau: f64,
    /// Epochs between teacher-weight updates.
    pub validation_interval: usize,
    pub epochs: usize,
    pub lr_w: f64,
    pub lr_lambda: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lambda_optimizer: OptimizerKind,
    pub filters: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.5,
            tau: 0.5,
            validation_interval: 50,
            epochs: 1500,
            lr_w: 0.01,
            lr_lambda: 0.2,
            batch_size: 64,
            optimizer: OptimizerKind::Sgd,
            lambda_optimizer: OptimizerKind::Adam,
            filters: DEFAULT_FILTERS,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.validation_interval == 0 || self.batch_size == 0 || self.filters == 0 {
            return Err(Error::Config(
                "validation interval, batch size and filter count must be positive".into(),
            ));
        }
        if !(self.lr_w > 0.0 && self.lr_lambda >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Result of one [`aed_train`] run.
#[derive(Clone, Debug)]
pub struct AedRun {
    /// Student at the epoch with the best validation accuracy.
    pub student: StudentNetwork,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub raw_lambda: Vec<f64>,
    /// Weights used by the inner loss after the last outer step.
    pub lambda_hat: Vec<f64>,
    /// Reparameterized final weights under fresh noise; drives removal.
    pub removal_weights: Vec<f64>,
    pub outer_steps: usize,
}

/// Instrumentation callbacks. Snapshots are only taken when an observer is attached.
pub enum DistillEvent<'a> {
    Inner {
        epoch: usize,
        lambda_before: &'a [f64],
        lambda_after: &'a [f64],
        lambda_hat: &'a [f64],
    },
    Outer {
        epoch: usize,
        weights_before: &'a [f64],
        weights_after: &'a [f64],
        lambda_before: &'a [f64],
        lambda_after: &'a [f64],
        lambda_hat: &'a [f64],
    },
}

pub trait DistillObserver {
    fn on_event(&mut self, event: &DistillEvent<'_>);
}

impl<F: FnMut(&DistillEvent<'_>)> DistillObserver for F {
    fn on_event(&mut self, event: &DistillEvent<'_>) {
        self(event)
    }
}

/// Evaluates `alpha * CE(p, y) + (1 - alpha) * sum_i lhat_i * KL(q_i || p)`,
/// averaged over rows.
pub fn aed_loss(
    probs: &[Vec<f64>],
    labels: &[usize],
    teachers: &[&[Vec<f64>]],
    lambda_hat: &[f64],
    alpha: f64,
) -> Result<f64> {
    if teachers.len() != lambda_hat.len() {
        return Err(Error::Config(format!(
            "{} teachers but {} weights",
            teachers.len(),
            lambda_hat.len()
        )));
    }
    let (ce, kls) = split_losses(probs, labels, teachers)?;
    let dist: f64 = kls.iter().zip(lambda_hat).map(|(k, l)| k * l).sum();
    Ok(alpha * ce + (1.0 - alpha) * dist)
}

/// Mean cross-entropy and mean KL against each teacher.
fn split_losses(probs: &[Vec<f64>], labels: &[usize], teachers: &[&[Vec<f64>]]) -> Result<(f64, Vec<f64>)> {
    if probs.len() != labels.len() || teachers.iter().any(|t| t.len() != probs.len()) {
        return Err(Error::Data("predictions, labels and teacher rows are not aligned".into()));
    }
    let n = probs.len().max(1) as f64;
    let ce = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(LOG_FLOOR).ln())
        .sum::<f64>()
        / n;
    let kls = teachers
        .iter()
        .map(|t| t.iter().zip(probs).map(|(q, p)| kl_divergence(q, p)).sum::<f64>() / n)
        .collect();
    Ok((ce, kls))
}

fn validation_accuracy(probs: &[Vec<f64>], dataset: &Dataset) -> f64 {
    let correct = probs
        .iter()
        .zip(&dataset.validation)
        .filter(|(p, s)| argmax(p) == s.label)
        .count();
    correct as f64 / dataset.validation.len().max(1) as f64
}

/// One outer step: gradient of the validation loss w.r.t. raw `lambda` with
/// the CE and KL values held constant. Returns the new `lhat` under `gs`.
fn outer_step(
    lambda: &mut Tensor,
    opt: &mut Optimizer,
    ce: f64,
    kls: &[f64],
    gs: &[f64],
    tau: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    let n = kls.len();
    let mut g = Graph::new();
    let l = g.param(lambda.clone());
    let neg = g.neg(l);
    let noise = g.constant(Tensor::vector(gs.to_vec()));
    let shifted = g.add(neg, noise)?;
    let logits = g.scale(shifted, 1.0 / tau);
    let gamma = g.softmax(logits);
    let neg_gamma = g.neg(gamma);
    let lhat = g.softmax(neg_gamma);
    let kl = g.constant(Tensor::vector(kls.to_vec()));
    let weighted = g.mul(lhat, kl)?;
    let dist = g.sum(weighted);
    let dist = g.scale(dist, 1.0 - alpha);
    let ce = g.constant(Tensor::scalar(alpha * ce));
    let loss = g.add(ce, dist)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    g.backward(loss)?;
    let grad = g.grad(l)?.clone();
    opt.step(&mut [lambda], &[&grad])?;
    debug_assert_eq!(lambda.len(), n);
    Ok(reparam_importance(&gumbel_unimportance_with_noise(lambda.data(), gs, tau)?))
}

fn rng_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
    shuffle.set_stream(1);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(2);
    (shuffle, noise)
}

/// Per-teacher soft targets on (train, validation).
struct Targets<'a> {
    train: Vec<&'a Rows>,
    validation: Vec<&'a Rows>,
}

fn check_inputs(dataset: &Dataset, teachers: &TeacherDistributions, config: &DistillConfig) -> Result<()> {
    config.validate()?;
    teachers.validate(dataset)?;
    if teachers.class_count != dataset.class_count {
        return Err(Error::Data(format!(
            "teachers have {} classes, dataset has {}",
            teachers.class_count, dataset.class_count
        )));
    }
    if dataset.validation.is_empty() {
        return Err(Error::Data("distillation needs a validation split".into()));
    }
    Ok(())
}

/// Bi-level adaptive ensemble distillation over all teachers in `teachers`.
pub fn aed_train(
    dataset: &Dataset,
    teachers: &TeacherDistributions,
    setting: &StudentSetting,
    config: &DistillConfig,
) -> Result<AedRun> {
    aed_train_observed(dataset, teachers, setting, config, None)
}

/// [`aed_train`] reporting every inner and outer step to `observer`.
pub fn aed_train_observed(
    dataset: &Dataset,
    teachers: &TeacherDistributions,
    setting: &StudentSetting,
    config: &DistillConfig,
    observer: Option<&mut dyn DistillObserver>,
) -> Result<AedRun> {
    check_inputs(dataset, teachers, config)?;
    let targets = Targets {
        train: teachers.teachers.iter().map(|t| t.train.as_slice()).collect(),
        validation: teachers.teachers.iter().map(|t| t.validation.as_slice()).collect(),
    };
    run_distillation(dataset, &targets, setting, config, true, observer)
}

fn run_distillation(
    dataset: &Dataset,
    targets: &Targets<'_>,
    setting: &StudentSetting,
    config: &DistillConfig,
    learn_weights: bool,
    mut observer: Option<&mut dyn DistillObserver>,
) -> Result<AedRun> {
    let n = targets.train.len();
    let mut net = build_student(
        setting,
        dataset.class_count,
        dataset.dim_count,
        config.filters,
        config.seed,
    )?;
    let (mut shuffle_rng, mut noise_rng) = rng_streams(config.seed);
    let mut opt_w = Optimizer::new(config.optimizer, config.lr_w);
    let mut opt_lambda = Optimizer::new(config.lambda_optimizer, config.lr_lambda);
    let mut lambda = Tensor::full(&[n], 1.0 / n as f64);
    let mut lambda_hat = vec![1.0 / n as f64; n];
    let labels: Vec<usize> = dataset.validation.iter().map(|s| s.label).collect();

    let mut best: Option<(f64, usize, StudentNetwork)> = None;
    let mut outer_steps = 0;
    for epoch in 1..=config.epochs {
        let lambda_before = observer.as_ref().map(|_| lambda.data().to_vec());
        train_epoch(
            &mut net,
            &mut opt_w,
            &dataset.train,
            &targets.train,
            &lambda_hat,
            config.alpha,
            config.batch_size,
            &mut shuffle_rng,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
            other => other,
        })?;
        if let (Some(obs), Some(before)) = (observer.as_mut(), &lambda_before) {
            obs.on_event(&DistillEvent::Inner {
                epoch,
                lambda_before: before,
                lambda_after: lambda.data(),
                lambda_hat: &lambda_hat,
            });
        }

        let val_probs = net.predict_proba(&dataset.validation)?;
        if learn_weights && epoch % config.validation_interval == 0 {
            let weights_before = observer.as_ref().map(|_| net.flat_parameters());
            let lambda_before = lambda.data().to_vec();
            let (ce, kls) = split_losses(&val_probs, &labels, &targets.validation)?;
            let gs = gumbel_noise(n, &mut noise_rng);
            lambda_hat = outer_step(&mut lambda, &mut opt_lambda, ce, &kls, &gs, config.tau, config.alpha)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch} outer step: {msg}")),
                    other => other,
                })?;
            outer_steps += 1;
            if let (Some(obs), Some(before)) = (observer.as_mut(), &weights_before) {
                obs.on_event(&DistillEvent::Outer {
                    epoch,
                    weights_before: before,
                    weights_after: &net.flat_parameters(),
                    lambda_before: &lambda_before,
                    lambda_after: lambda.data(),
                    lambda_hat: &lambda_hat,
                });
            }
        }

        let acc = validation_accuracy(&val_probs, dataset);
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, net.clone()));
        }
    }

    let (val_accuracy, best_epoch, student) = match best {
        Some(b) => b,
        None => {
            let probs = net.predict_proba(&dataset.validation)?;
            (validation_accuracy(&probs, dataset), 0, net)
        }
    };
    let gs = gumbel_noise(n, &mut noise_rng);
    let removal_weights = reparam_importance(&gumbel_unimportance_with_noise(lambda.data(), &gs, config.tau)?);
    Ok(AedRun {
        student,
        val_accuracy,
        best_epoch,
        raw_lambda: lambda.into_data(),
        lambda_hat,
        removal_weights,
        outer_steps,
    })
}

#[cfg(test)]
mod tests;
