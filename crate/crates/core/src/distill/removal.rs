use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{aed_train, check_inputs, run_distillation, AedRun, DistillConfig, Targets};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{StudentNetwork, StudentSetting};
use crate::teachers::{ensemble_average, TeacherDistributions};

/// One removal-loop entry: the run on `active_ids` and the teacher dropped after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalStep {
    pub removed_id: usize,
    pub active_ids: Vec<usize>,
    /// Final reparameterized weights, aligned with `active_ids`.
    pub lambda_hat: Vec<f64>,
    pub val_accuracy: f64,
}

/// One distillation run performed by a removal strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub active_ids: Vec<usize>,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: StudentNetwork,
    /// Teachers of the selected configuration.
    pub active_ids: Vec<usize>,
    /// Final weights of the selected run, aligned with `active_ids`.
    pub lambda_hat: Vec<f64>,
    pub val_accuracy: f64,
    pub removal_trace: Vec<RemovalStep>,
    pub runs: Vec<RunRecord>,
}

impl DistillOutcome {
    fn from_run(active_ids: Vec<usize>, run: AedRun) -> Self {
        DistillOutcome {
            student: run.student,
            active_ids,
            lambda_hat: run.removal_weights,
            val_accuracy: run.val_accuracy,
            removal_trace: Vec::new(),
            runs: Vec::new(),
        }
    }

    /// Number of [`aed_train`] invocations.
    pub fn distill_runs(&self) -> usize {
        self.runs.len()
    }
}

/// Higher accuracy wins; equal accuracy goes to the smaller teacher set.
fn better(acc: f64, size: usize, best: &DistillOutcome) -> bool {
    acc > best.val_accuracy || (acc == best.val_accuracy && size < best.active_ids.len())
}

fn tag(position: &str, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{position}: {msg}")),
        other => other,
    }
}

/// Runs [`aed_train`], drops the teacher with the lowest final weight, and
/// repeats until one teacher remains. Returns the best configuration seen.
pub fn lightts_removal(
    dataset: &Dataset,
    teachers: &TeacherDistributions,
    setting: &StudentSetting,
    config: &DistillConfig,
) -> Result<DistillOutcome> {
    check_inputs(dataset, teachers, config)?;
    let mut active = teachers.ids();
    let mut trace = Vec::new();
    let mut runs = Vec::new();
    let mut best: Option<DistillOutcome> = None;
    loop {
        let subset = teachers.subset(&active)?;
        let run = aed_train(dataset, &subset, setting, config)
            .map_err(|e| tag(&format!("removal round {} ({} teachers)", runs.len() + 1, active.len()), e))?;
        runs.push(RunRecord {
            active_ids: active.clone(),
            val_accuracy: run.val_accuracy,
        });
        let weights = run.removal_weights.clone();
        let acc = run.val_accuracy;
        if best.as_ref().is_none_or(|b| better(acc, active.len(), b)) {
            best = Some(DistillOutcome::from_run(active.clone(), run));
        }
        if active.len() == 1 {
            break;
        }
        let drop = weights
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty");
        trace.push(RemovalStep {
            removed_id: active[drop],
            active_ids: active.clone(),
            lambda_hat: weights,
            val_accuracy: acc,
        });
        active.remove(drop);
    }
    let mut out = best.expect("at least one run");
    out.removal_trace = trace;
    out.runs = runs;
    Ok(out)
}

/// Breadth-wise leave-one-out search: every single-teacher removal of a set
/// is evaluated, and sets that beat their parent are expanded in turn, until
/// `budget` runs are spent or nothing improves.
pub fn leave_one_out_removal(
    dataset: &Dataset,
    teachers: &TeacherDistributions,
    setting: &StudentSetting,
    config: &DistillConfig,
    budget: usize,
) -> Result<DistillOutcome> {
    check_inputs(dataset, teachers, config)?;
    let full = teachers.ids();
    let n = full.len();
    if budget < n + 1 && n > 1 {
        return Err(Error::Config(format!(
            "budget {budget} cannot cover the first level ({} runs)",
            n + 1
        )));
    }
    let mut runs = Vec::new();
    let mut memo: HashMap<Vec<usize>, f64> = HashMap::new();
    let evaluate = |ids: &[usize], runs: &mut Vec<RunRecord>| -> Result<AedRun> {
        let run = aed_train(dataset, &teachers.subset(ids)?, setting, config)
            .map_err(|e| tag(&format!("leave-one-out run {} on {ids:?}", runs.len() + 1), e))?;
        runs.push(RunRecord {
            active_ids: ids.to_vec(),
            val_accuracy: run.val_accuracy,
        });
        Ok(run)
    };

    let root = evaluate(&full, &mut runs)?;
    memo.insert(full.clone(), root.val_accuracy);
    let mut best = DistillOutcome::from_run(full.clone(), root);
    let mut queue = VecDeque::from([full]);
    'search: while let Some(parent) = queue.pop_front() {
        if parent.len() == 1 {
            continue;
        }
        let parent_acc = memo[&parent];
        for i in 0..parent.len() {
            let mut child = parent.clone();
            child.remove(i);
            if memo.contains_key(&child) {
                continue;
            }
            if runs.len() >= budget {
                break 'search;
            }
            let run = evaluate(&child, &mut runs)?;
            let acc = run.val_accuracy;
            memo.insert(child.clone(), acc);
            if better(acc, child.len(), &best) {
                best = DistillOutcome::from_run(child.clone(), run);
            }
            if acc > parent_acc {
                queue.push_back(child);
            }
        }
    }
    best.runs = runs;
    Ok(best)
}

/// Result of [`classic_kd_train`].
#[derive(Clone, Debug)]
pub struct ClassicOutcome {
    pub student: StudentNetwork,
    pub val_accuracy: f64,
    pub best_epoch: usize,
}

/// Distillation against the plain ensemble average, without teacher weights.
pub fn classic_kd_train(
    dataset: &Dataset,
    teachers: &TeacherDistributions,
    setting: &StudentSetting,
    config: &DistillConfig,
) -> Result<ClassicOutcome> {
    check_inputs(dataset, teachers, config)?;
    let train: Vec<&[Vec<f64>]> = teachers.teachers.iter().map(|t| t.train.as_slice()).collect();
    let val: Vec<&[Vec<f64>]> = teachers.teachers.iter().map(|t| t.validation.as_slice()).collect();
    let avg_train = ensemble_average(&train)?;
    let avg_val = ensemble_average(&val)?;
    let targets = Targets {
        train: vec![&avg_train],
        validation: vec![&avg_val],
    };
    let run = run_distillation(dataset, &targets, setting, config, false, None)?;
    Ok(ClassicOutcome {
        student: run.student,
        val_accuracy: run.val_accuracy,
        best_epoch: run.best_epoch,
    })
}
