//! Multi-objective Bayesian optimization over student settings.
//!
//! After `P` random evaluations, each iteration draws a scalarization weight
//! `β`, fits a GP to the evaluated accuracies (in encoded or raw coordinates),
//! and evaluates the unevaluated candidate with the highest expected
//! improvement of `β·accuracy - (1-β)·size/size_max`.

mod gp;

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::{lightts_removal, DistillConfig};
use crate::encoder::{EncoderBundle, EncoderConfig};
use crate::error::{Error, Result};
use crate::models::{model_size_bits, StudentSetting};
use crate::space::{
    pareto_frontier, sample_settings, setting_from_index, setting_index, size_max, space_cardinality,
    EvaluatedSetting,
};
use crate::teachers::TeacherDistributions;

pub use gp::{
    expected_improvement, gp_fit, gp_fit_with, gp_posterior, joint_objective, length_scale_grid, se_kernel,
    signal_variance_grid, GpModel, JITTER, MAX_JITTER,
};

/// How the next setting is chosen after the random initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// GP over the two-phase encoder's latent vectors.
    Encoded,
    /// GP over the raw `(L, F, W)` values.
    Raw,
    /// Uniform over unevaluated settings.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaSampler {
    Uniform,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoboConfig {
    /// `P`: random settings evaluated first.
    pub initial: usize,
    /// `Q`: total successful evaluations.
    pub total: usize,
    /// `R`: unevaluated settings used for reconstruction training.
    pub autoencoder_samples: usize,
    pub pool_size: usize,
    /// Epochs for a freshly initialized encoder.
    pub encoder_epochs: usize,
    /// Epochs when warm-starting from the previous iteration's encoder.
    pub finetune_epochs: usize,
    /// Warm-start the encoder each iteration instead of retraining it.
    pub fine_tune: bool,
    pub strategy: Strategy,
    pub beta: BetaSampler,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for MoboConfig {
    fn default() -> Self {
        MoboConfig {
            initial: 10,
            total: 50,
            autoencoder_samples: 500,
            pool_size: 512,
            encoder_epochs: 1000,
            finetune_epochs: 200,
            fine_tune: true,
            strategy: Strategy::Encoded,
            beta: BetaSampler::Uniform,
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

/// The searched space and what model sizes are measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub blocks: usize,
    pub class_count: usize,
    pub input_dims: usize,
    pub filters: usize,
}

impl SearchSpace {
    pub fn size_bits(&self, setting: &StudentSetting) -> u64 {
        model_size_bits(setting, self.class_count, self.input_dims, self.filters)
    }

    pub fn size_max(&self) -> Result<u64> {
        size_max(self.blocks, self.class_count, self.input_dims, self.filters)
    }
}

impl MoboConfig {
    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        let card = space_cardinality(space.blocks)?;
        if self.initial == 0 {
            return Err(Error::Config("initial evaluation count P must be at least 1".into()));
        }
        if self.initial > self.total {
            return Err(Error::Config(format!(
                "P = {} exceeds Q = {}",
                self.initial, self.total
            )));
        }
        if self.total as u64 > card {
            return Err(Error::Config(format!(
                "Q = {} exceeds the {card} settings of the space",
                self.total
            )));
        }
        if self.pool_size == 0 || self.autoencoder_samples == 0 {
            return Err(Error::Config("pool_size and autoencoder_samples must be positive".into()));
        }
        if let BetaSampler::Fixed(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Config(format!("fixed beta must lie in [0, 1], got {b}")));
            }
        }
        self.encoder.validate()
    }
}

/// Produces the accuracy of a setting.
pub trait SettingEvaluator {
    fn evaluate(&mut self, setting: &StudentSetting) -> Result<f64>;
}

impl<F: FnMut(&StudentSetting) -> Result<f64>> SettingEvaluator for F {
    fn evaluate(&mut self, setting: &StudentSetting) -> Result<f64> {
        self(setting)
    }
}

/// Evaluates a setting with guided teacher removal; accuracy is on validation data.
pub struct LightTsEvaluator<'a> {
    pub dataset: &'a Dataset,
    pub teachers: &'a TeacherDistributions,
    pub distill: DistillConfig,
    /// Distillation runs performed so far.
    pub runs: usize,
}

impl<'a> LightTsEvaluator<'a> {
    pub fn new(dataset: &'a Dataset, teachers: &'a TeacherDistributions, distill: DistillConfig) -> Self {
        LightTsEvaluator {
            dataset,
            teachers,
            distill,
            runs: 0,
        }
    }
}

impl SettingEvaluator for LightTsEvaluator<'_> {
    fn evaluate(&mut self, setting: &StudentSetting) -> Result<f64> {
        let out = lightts_removal(self.dataset, self.teachers, setting, &self.distill)?;
        self.runs += out.distill_runs();
        Ok(out.val_accuracy)
    }
}

/// One evaluation in search order. Iteration 0 is the random initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub setting: StudentSetting,
    /// `None` when the evaluation failed; such settings are never retried
    /// and are left out of the GP and the frontier.
    pub accuracy: Option<f64>,
    pub size_bits: u64,
    pub iteration: usize,
    pub beta: Option<f64>,
}

impl Evaluation {
    pub fn evaluated(&self) -> Option<EvaluatedSetting> {
        self.accuracy.map(|accuracy| EvaluatedSetting {
            setting: self.setting.clone(),
            accuracy,
            size_bits: self.size_bits,
        })
    }
}

/// Everything needed to continue a search.
#[derive(Clone, Debug, Default)]
pub struct SearchState {
    pub evaluations: Vec<Evaluation>,
    pub encoder: Option<EncoderBundle>,
}

impl SearchState {
    pub fn successful(&self) -> Vec<EvaluatedSetting> {
        self.evaluations.iter().filter_map(Evaluation::evaluated).collect()
    }
}

/// Called after every evaluation, e.g. to persist progress.
pub trait SearchObserver {
    fn on_evaluation(&mut self, state: &SearchState) -> Result<()>;
}

impl<F: FnMut(&SearchState) -> Result<()>> SearchObserver for F {
    fn on_evaluation(&mut self, state: &SearchState) -> Result<()> {
        self(state)
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub evaluations: Vec<Evaluation>,
    pub frontier: Vec<EvaluatedSetting>,
    pub encoder: Option<EncoderBundle>,
}

impl SearchOutcome {
    pub fn successful(&self) -> Vec<EvaluatedSetting> {
        self.evaluations.iter().filter_map(Evaluation::evaluated).collect()
    }
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Up to `count` distinct settings whose indices are not in `taken`.
/// Enumerates the remainder when it is no larger than `count`.
fn sample_unevaluated(
    blocks: usize,
    taken: &HashSet<u64>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StudentSetting>> {
    let card = space_cardinality(blocks)?;
    let remaining = card - taken.len() as u64;
    if remaining <= count as u64 {
        return (0..card)
            .filter(|i| !taken.contains(i))
            .map(|i| setting_from_index(i, blocks))
            .collect();
    }
    let mut picked = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.gen_range(0..card);
        if !taken.contains(&i) && picked.insert(i) {
            out.push(setting_from_index(i, blocks)?);
        }
    }
    Ok(out)
}

fn record(
    state: &mut SearchState,
    observer: &mut Option<&mut dyn SearchObserver>,
    evaluation: Evaluation,
) -> Result<()> {
    state.evaluations.push(evaluation);
    if let Some(o) = observer.as_mut() {
        o.on_evaluation(state)?;
    }
    Ok(())
}

fn evaluate_one(
    space: &SearchSpace,
    evaluator: &mut dyn SettingEvaluator,
    setting: StudentSetting,
    iteration: usize,
    beta: Option<f64>,
) -> Result<Evaluation> {
    let accuracy = match evaluator.evaluate(&setting) {
        Ok(a) => Some(a),
        // divergence marks the setting failed; anything else is fatal
        Err(Error::NonFinite(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        size_bits: space.size_bits(&setting),
        setting,
        accuracy,
        iteration,
        beta,
    })
}

/// Runs (or resumes from `state`) the search until `Q` settings have been
/// evaluated successfully.
pub fn mobo_search(
    space: &SearchSpace,
    config: &MoboConfig,
    evaluator: &mut dyn SettingEvaluator,
    mut state: SearchState,
    mut observer: Option<&mut dyn SearchObserver>,
) -> Result<SearchOutcome> {
    config.validate(space)?;
    let size_max = space.size_max()?;
    let initial = sample_settings(config.initial, space.blocks, config.seed)?;
    let done_initial = state.evaluations.iter().filter(|e| e.iteration == 0).count();
    for (e, s) in state.evaluations.iter().zip(&initial) {
        if e.iteration == 0 && e.setting != *s {
            return Err(Error::Config(format!(
                "existing evaluations do not match seed {}: expected {s}, found {}",
                config.seed, e.setting
            )));
        }
    }
    for setting in initial.into_iter().skip(done_initial) {
        let ev = evaluate_one(space, evaluator, setting, 0, None)?;
        record(&mut state, &mut observer, ev)?;
    }

    let card = space_cardinality(space.blocks)?;
    loop {
        let successful = state.successful();
        if successful.len() >= config.total {
            break;
        }
        let taken: HashSet<u64> = state
            .evaluations
            .iter()
            .map(|e| setting_index(&e.setting))
            .collect::<Result<_>>()?;
        if taken.len() as u64 >= card {
            return Err(Error::Config(format!(
                "search space exhausted after {} evaluations with only {} successful",
                taken.len(),
                successful.len()
            )));
        }
        let iteration = 1 + state.evaluations.iter().filter(|e| e.iteration > 0).count();
        let mut rng = iteration_rng(config.seed, iteration);
        let beta = match config.beta {
            BetaSampler::Uniform => rng.gen::<f64>(),
            BetaSampler::Fixed(b) => b,
        };
        let pool = sample_unevaluated(space.blocks, &taken, config.pool_size, &mut rng)?;
        let chosen = match config.strategy {
            Strategy::Random => pool[rng.gen_range(0..pool.len())].clone(),
            Strategy::Raw => {
                let z: Vec<Vec<f64>> = successful.iter().map(|e| e.setting.raw_values()).collect();
                let zc: Vec<Vec<f64>> = pool.iter().map(StudentSetting::raw_values).collect();
                acquire(space, &successful, &z, &pool, &zc, beta, size_max)?
            }
            Strategy::Encoded => {
                let recon = sample_unevaluated(space.blocks, &taken, config.autoencoder_samples, &mut rng)?;
                let labelled: Vec<(StudentSetting, f64)> =
                    successful.iter().map(|e| (e.setting.clone(), e.accuracy)).collect();
                let encoder = match state.encoder.take() {
                    Some(mut enc) if config.fine_tune => {
                        enc.train(&recon, &labelled, config.finetune_epochs)?;
                        enc
                    }
                    _ => {
                        let mut enc = EncoderBundle::new(space.blocks, config.encoder.clone(), config.seed)?;
                        enc.train(&recon, &labelled, config.encoder_epochs)?;
                        enc
                    }
                };
                let settings: Vec<StudentSetting> = successful.iter().map(|e| e.setting.clone()).collect();
                let z = encoder.encode_many(&settings)?;
                let zc = encoder.encode_many(&pool)?;
                state.encoder = Some(encoder);
                acquire(space, &successful, &z, &pool, &zc, beta, size_max)?
            }
        };
        let ev = evaluate_one(space, evaluator, chosen, iteration, Some(beta))?;
        record(&mut state, &mut observer, ev)?;
    }
    let successful = state.successful();
    Ok(SearchOutcome {
        frontier: pareto_frontier(&successful),
        evaluations: state.evaluations,
        encoder: state.encoder,
    })
}

/// Candidate with the highest expected improvement; ties go to the larger
/// `mean_g`, then to the earlier pool entry.
fn acquire(
    space: &SearchSpace,
    evaluated: &[EvaluatedSetting],
    z: &[Vec<f64>],
    pool: &[StudentSetting],
    pool_z: &[Vec<f64>],
    beta: f64,
    size_max: u64,
) -> Result<StudentSetting> {
    if evaluated.is_empty() {
        return Err(Error::Config("no successful evaluations to fit the GP".into()));
    }
    let y: Vec<f64> = evaluated.iter().map(|e| e.accuracy).collect();
    let model = gp_fit(z, &y)?;
    let best = evaluated
        .iter()
        .map(|e| joint_objective(e.accuracy, 0.0, e.size_bits, beta, size_max).0)
        .fold(f64::NEG_INFINITY, f64::max);
    let scores: Vec<(f64, f64)> = pool
        .par_iter()
        .zip(pool_z)
        .map(|(s, zc)| {
            let (mu, var) = gp_posterior(&model, zc);
            let (mean_g, std_g) = joint_objective(mu, var, space.size_bits(s), beta, size_max);
            (expected_improvement(mean_g, std_g, best), mean_g)
        })
        .collect();
    let mut pick = 0;
    for (i, (ei, mean)) in scores.iter().enumerate().skip(1) {
        let (bei, bmean) = scores[pick];
        if *ei > bei || (*ei == bei && *mean > bmean) {
            pick = i;
        }
    }
    Ok(pool[pick].clone())
}

/// One line of `evaluations.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EvaluationRow {
    setting: String,
    accuracy: Option<f64>,
    size_bits: u64,
    iteration: usize,
    beta: Option<f64>,
}

pub fn write_evaluations_csv(path: &Path, evaluations: &[Evaluation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in evaluations {
        w.serialize(EvaluationRow {
            setting: e.setting.to_json(),
            accuracy: e.accuracy,
            size_bits: e.size_bits,
            iteration: e.iteration,
            beta: e.beta,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_evaluations_csv(path: &Path) -> Result<Vec<Evaluation>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<EvaluationRow>()
        .map(|row| {
            let row = row?;
            Ok(Evaluation {
                setting: StudentSetting::from_json(&row.setting)?,
                accuracy: row.accuracy,
                size_bits: row.size_bits,
                iteration: row.iteration,
                beta: row.beta,
            })
        })
        .collect()
}
