//! The four commands and their on-disk layout under the output root:
//!
//! ```text
//! teachers/            teacher_<id>.{train,val}.csv, manifest.json
//! distill/<method>/    student.json, report.json, manifest.json, removal_trace.json
//! search/<strategy>/   evaluations.csv, frontier.csv, encoder.json, manifest.json
//! pareto_plot.csv      written by `report`
//! ```

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use tsdistill::data::Dataset;
use tsdistill::distill::{aed_train, classic_kd_train, leave_one_out_removal, lightts_removal};
use tsdistill::encoder::EncoderBundle;
use tsdistill::mobo::{
    mobo_search, read_evaluations_csv, write_evaluations_csv, Evaluation, LightTsEvaluator, SearchSpace,
    SearchState,
};
use tsdistill::models::{argmax, model_size_bits, Checkpoint, StudentNetwork, StudentSetting};
use tsdistill::space::{
    pareto_frontier, read_frontier_csv, write_frontier_csv, FrontierRow, Phase,
};
use tsdistill::teachers::{load_teachers, save_teachers, train_teacher_ensemble, TeacherDistributions, TeacherManifest};

use crate::config::{Method, RunConfig};
use crate::UsageError;

const LOCK_FILE: &str = ".tsdistill.lock";

/// Exclusive use of an output root, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => anyhow::bail!(
                "another command is using {} (delete {} if no command is running)",
                root.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("cannot write to output directory {}", root.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn manifest(command: &str, cfg: &RunConfig, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": cfg,
        "results": extra,
    })
}

fn existing_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(UsageError(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

fn load_dataset(train: Option<&Path>, test: Option<&Path>, val_fraction: f64, seed: u64) -> Result<Dataset> {
    let train = train.ok_or_else(|| UsageError("no training data: pass --train <file>".into()))?;
    existing_file(train, "training file")?;
    if let Some(t) = test {
        existing_file(t, "test file")?;
    }
    Dataset::load(train, test, val_fraction, seed).with_context(|| format!("loading {}", train.display()))
}

fn accuracy_of(rows: &[Vec<f64>], labels: impl Iterator<Item = usize>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (r, l) in rows.iter().zip(labels) {
        hit += usize::from(argmax(r) == l);
        n += 1;
    }
    hit as f64 / n.max(1) as f64
}

pub fn train_teachers(root: &Path, cfg: &RunConfig) -> Result<()> {
    let _lock = OutputLock::acquire(root)?;
    let dataset = load_dataset(cfg.train.as_deref(), cfg.test.as_deref(), cfg.val_fraction, cfg.seed)?;
    let tcfg = cfg.teacher_config()?;
    let dir = root.join("teachers");
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    eprintln!(
        "training {} teachers for {} epochs on {} series ({} classes)",
        tcfg.count,
        tcfg.epochs,
        dataset.train.len(),
        dataset.class_count
    );
    let ensemble = train_teacher_ensemble(&dataset, &tcfg)?;
    save_teachers(&dir, &ensemble, serde_json::to_value(cfg)?)?;
    for t in &ensemble.teachers {
        let acc = accuracy_of(&t.validation, dataset.validation.iter().map(|s| s.label));
        println!("teacher {:>2}  validation accuracy {acc:.4}", t.id);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

/// Teachers plus the dataset split they were produced on.
fn load_ensemble(root: &Path, cfg: &RunConfig) -> Result<(TeacherManifest, TeacherDistributions, Dataset)> {
    let dir = root.join("teachers");
    if !dir.join(tsdistill::teachers::MANIFEST_FILE).is_file() {
        return Err(UsageError(format!(
            "no teachers under {}: run train-teachers first",
            dir.display()
        ))
        .into());
    }
    let (manifest, teachers) = load_teachers(&dir)?;
    let recorded: RunConfig = serde_json::from_value(manifest.config.clone()).unwrap_or_default();
    // the split must be the one the teachers saw, whatever the current seed and fraction
    let train = cfg.train.as_deref().or(recorded.train.as_deref());
    let test = cfg.test.as_deref().or(recorded.test.as_deref());
    let dataset = load_dataset(train, test, recorded.val_fraction, recorded.seed)?;
    teachers
        .validate(&dataset)
        .context("teacher files do not match the dataset")?;
    Ok((manifest, teachers, dataset))
}

#[derive(Serialize)]
struct DistillReport {
    method: &'static str,
    setting: StudentSetting,
    val_accuracy: f64,
    test_accuracy: Option<f64>,
    size_bits: u64,
    active_teachers: Vec<usize>,
    distill_runs: usize,
}

pub fn distill(root: &Path, cfg: &RunConfig) -> Result<()> {
    let _lock = OutputLock::acquire(root)?;
    let (_, teachers, dataset) = load_ensemble(root, cfg)?;
    let setting = cfg.student_setting()?;
    let dcfg = cfg.distill_config();
    let method = cfg.method;
    let dir = root.join("distill").join(method.name());
    fs::create_dir_all(&dir)?;

    let (student, val_accuracy, active, runs, trace): (StudentNetwork, f64, Vec<usize>, usize, Option<serde_json::Value>) =
        match method {
            Method::Lightts => {
                let out = lightts_removal(&dataset, &teachers, &setting, &dcfg)?;
                let runs = out.distill_runs();
                let trace = json!({ "removals": out.removal_trace, "runs": out.runs, "lambda_hat": out.lambda_hat });
                (out.student, out.val_accuracy, out.active_ids, runs, Some(trace))
            }
            Method::AedLoo => {
                let budget = cfg.loo_budget.unwrap_or(usize::MAX);
                let out = leave_one_out_removal(&dataset, &teachers, &setting, &dcfg, budget)?;
                let runs = out.distill_runs();
                let trace = json!({ "runs": out.runs, "lambda_hat": out.lambda_hat });
                (out.student, out.val_accuracy, out.active_ids, runs, Some(trace))
            }
            Method::AedOne => {
                let run = aed_train(&dataset, &teachers, &setting, &dcfg)?;
                let trace = json!({ "raw_lambda": run.raw_lambda, "lambda_hat": run.lambda_hat });
                (run.student, run.val_accuracy, teachers.ids(), 1, Some(trace))
            }
            Method::Classic => {
                let run = classic_kd_train(&dataset, &teachers, &setting, &dcfg)?;
                (run.student, run.val_accuracy, teachers.ids(), 1, None)
            }
        };

    let test_accuracy = if dataset.test.is_empty() {
        None
    } else {
        Some(student.accuracy(&dataset.test)?)
    };
    let size_bits = model_size_bits(&setting, dataset.class_count, dataset.dim_count, cfg.filters);
    student.to_checkpoint()?.save(&dir.join("student.json"))?;
    if let Some(trace) = trace {
        write_json(&dir.join("removal_trace.json"), &trace)?;
    }
    let report = DistillReport {
        method: method.name(),
        setting,
        val_accuracy,
        test_accuracy,
        size_bits,
        active_teachers: active,
        distill_runs: runs,
    };
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("manifest.json"), &manifest("distill", cfg, serde_json::to_value(&report)?))?;
    println!(
        "{}: validation {:.4}, test {}, {} bits, teachers {:?}",
        report.method,
        report.val_accuracy,
        report.test_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
        report.size_bits,
        report.active_teachers
    );
    Ok(())
}

fn frontier_rows(evaluations: &[Evaluation]) -> Vec<FrontierRow> {
    let phased: Vec<(tsdistill::space::EvaluatedSetting, Phase)> = evaluations
        .iter()
        .filter_map(|e| {
            let phase = if e.iteration == 0 { Phase::Initial } else { Phase::Searched };
            e.evaluated().map(|p| (p, phase))
        })
        .collect();
    let rows: Vec<FrontierRow> = phased.iter().map(|(p, ph)| FrontierRow::new(p, *ph)).collect();
    pareto_frontier(&rows)
}

pub fn search(root: &Path, cfg: &RunConfig) -> Result<()> {
    let _lock = OutputLock::acquire(root)?;
    let (_, teachers, dataset) = load_ensemble(root, cfg)?;
    let space = SearchSpace {
        blocks: cfg.blocks,
        class_count: dataset.class_count,
        input_dims: dataset.dim_count,
        filters: cfg.filters,
    };
    let mcfg = cfg.mobo_config();
    mcfg.validate(&space)?;
    let dir = root.join("search").join(cfg.strategy.name());
    fs::create_dir_all(&dir)?;
    let eval_path = dir.join("evaluations.csv");
    let encoder_path = dir.join("encoder.json");
    let frontier_path = dir.join("frontier.csv");

    let mut state = SearchState::default();
    if eval_path.is_file() {
        state.evaluations = read_evaluations_csv(&eval_path)
            .with_context(|| format!("cannot resume from {}", eval_path.display()))?;
        if encoder_path.is_file() {
            state.encoder = Some(EncoderBundle::from_checkpoint(&Checkpoint::load(&encoder_path)?)?);
        }
        eprintln!("resuming after {} evaluations", state.evaluations.len());
    }

    let mut evaluator = LightTsEvaluator::new(&dataset, &teachers, cfg.distill_config());
    let mut persist = |s: &SearchState| -> tsdistill::Result<()> {
        write_evaluations_csv(&eval_path, &s.evaluations)?;
        if let Some(enc) = &s.encoder {
            enc.to_checkpoint()?.save(&encoder_path)?;
        }
        if let Some(last) = s.evaluations.last() {
            eprintln!(
                "[{:>3}] {} accuracy {} size {} bits",
                s.evaluations.len(),
                last.setting,
                last.accuracy.map_or("failed".into(), |a| format!("{a:.4}")),
                last.size_bits
            );
        }
        Ok(())
    };
    let outcome = mobo_search(&space, &mcfg, &mut evaluator, state, Some(&mut persist))?;
    write_evaluations_csv(&eval_path, &outcome.evaluations)?;
    let rows = frontier_rows(&outcome.evaluations);
    write_frontier_csv(&frontier_path, &rows)?;
    let results = json!({
        "evaluations": outcome.evaluations.len(),
        "successful": outcome.successful().len(),
        "frontier_size": rows.len(),
        "distill_runs_this_session": evaluator.runs,
        "size_max": space.size_max()?,
    });
    write_json(&dir.join("manifest.json"), &manifest("search", cfg, results))?;
    println!("frontier ({} settings) written to {}", rows.len(), frontier_path.display());
    for r in &rows {
        println!("  {:<30} accuracy {:.4}  {:>10} bits", r.setting, r.accuracy, r.size_bits);
    }
    Ok(())
}

/// `(series, rows)` for every `search/<series>/frontier.csv`, sorted by series.
fn collect_frontiers(root: &Path) -> Result<Vec<(String, Vec<FrontierRow>)>> {
    let search = root.join("search");
    let mut out = Vec::new();
    if !search.is_dir() {
        return Ok(out);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&search)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frontier.csv").is_file())
        .collect();
    dirs.sort();
    for d in dirs {
        let name = d.file_name().and_then(|n| n.to_str()).unwrap_or("search").to_string();
        out.push((name, read_frontier_csv(&d.join("frontier.csv"))?));
    }
    Ok(out)
}

fn collect_distill_reports(root: &Path) -> Result<Vec<serde_json::Value>> {
    let dir = root.join("distill");
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path().join("report.json")))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    for p in paths {
        out.push(serde_json::from_str(&fs::read_to_string(&p)?)?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct PlotRow<'a> {
    size_bits: u64,
    accuracy: f64,
    series: &'a str,
}

pub fn report(root: &Path) -> Result<()> {
    let frontiers = collect_frontiers(root)?;
    let reports = collect_distill_reports(root)?;
    if frontiers.is_empty() && reports.is_empty() {
        println!("no results under {}", root.display());
        return Ok(());
    }
    let _lock = OutputLock::acquire(root)?;
    if !reports.is_empty() {
        println!("{:<10} {:>10} {:>10} {:>12}  teachers", "method", "val acc", "test acc", "size bits");
        for r in &reports {
            let acc = |k: &str| r[k].as_f64().map_or("n/a".to_string(), |a| format!("{a:.4}"));
            println!(
                "{:<10} {:>10} {:>10} {:>12}  {}",
                r["method"].as_str().unwrap_or("?"),
                acc("val_accuracy"),
                acc("test_accuracy"),
                r["size_bits"].as_u64().map_or("n/a".to_string(), |b| b.to_string()),
                r["active_teachers"]
            );
        }
        println!();
    }
    if !frontiers.is_empty() {
        println!("{:<10} {:<32} {:>10} {:>12}  phase", "series", "setting", "accuracy", "size bits");
        let mut w = csv::Writer::from_path(root.join("pareto_plot.csv"))?;
        for (series, rows) in &frontiers {
            for r in rows {
                let phase = match r.phase {
                    Phase::Initial => "initial",
                    Phase::Searched => "searched",
                };
                println!("{series:<10} {:<32} {:>10.4} {:>12}  {phase}", r.setting, r.accuracy, r.size_bits);
                w.serialize(PlotRow {
                    size_bits: r.size_bits,
                    accuracy: r.accuracy,
                    series,
                })?;
            }
        }
        w.flush()?;
        println!("plot data written to {}", root.join("pareto_plot.csv").display());
    }
    Ok(())
}
