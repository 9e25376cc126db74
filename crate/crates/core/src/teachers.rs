//! Teacher ensembles: frozen class distributions on the train and validation splits.
//!
//! Deep teachers are trained in-process; any other classifier enters through
//! CSV files with one row per sample and a `class_0,...,class_{K-1}` header.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Optimizer;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{build_student, BlockSetting, StudentSetting, DEFAULT_FILTERS};
use crate::training::train_epoch;

/// Row-sum tolerance under which imported rows are kept verbatim.
const ROW_SUM_EXACT: f64 = 1e-6;
/// Row sums within this distance of 1 are renormalized; beyond it rejected.
const ROW_SUM_BAND: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Trained,
    Imported,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub id: usize,
    pub provenance: Provenance,
    /// `[train samples][classes]`, aligned with `Dataset::train`.
    pub train: Vec<Vec<f64>>,
    /// `[validation samples][classes]`, aligned with `Dataset::validation`.
    pub validation: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherDistributions {
    pub class_count: usize,
    pub teachers: Vec<Teacher>,
}

impl TeacherDistributions {
    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    /// The teachers whose ids are listed, in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<TeacherDistributions> {
        let teachers = ids
            .iter()
            .map(|id| {
                self.teachers
                    .iter()
                    .find(|t| t.id == *id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown teacher id {id}")))
            })
            .collect::<Result<_>>()?;
        Ok(TeacherDistributions {
            class_count: self.class_count,
            teachers,
        })
    }

    pub fn ids(&self) -> Vec<usize> {
        self.teachers.iter().map(|t| t.id).collect()
    }

    /// Checks shapes against `dataset` and that every row is a distribution.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.teachers.is_empty() {
            return Err(Error::Config("no teachers".into()));
        }
        for t in &self.teachers {
            for (split, rows, n) in [
                ("train", &t.train, dataset.train.len()),
                ("validation", &t.validation, dataset.validation.len()),
            ] {
                if rows.len() != n {
                    return Err(Error::Data(format!(
                        "teacher {} has {} {split} rows, dataset has {n}",
                        t.id,
                        rows.len()
                    )));
                }
                for (r, row) in rows.iter().enumerate() {
                    let sum: f64 = row.iter().sum();
                    if row.len() != self.class_count
                        || row.iter().any(|p| *p < 0.0 || !p.is_finite())
                        || (sum - 1.0).abs() > ROW_SUM_EXACT
                    {
                        return Err(Error::Data(format!(
                            "teacher {} {split} row {} is not a {}-class distribution",
                            t.id,
                            r + 1,
                            self.class_count
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// How deep teachers are trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub count: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub setting: StudentSetting,
    pub filters: usize,
    pub seed: u64,
}

impl TeacherConfig {
    /// Full-precision `(3, 40, 32)` blocks, Adam at 0.01, batch 64, 1500 epochs.
    pub fn new(count: usize, blocks: usize, seed: u64) -> Result<Self> {
        Ok(TeacherConfig {
            count,
            epochs: 1500,
            lr: 0.01,
            batch_size: 64,
            setting: StudentSetting::uniform(blocks, BlockSetting::new(3, 40, 32))?,
            filters: DEFAULT_FILTERS,
            seed,
        })
    }

    pub fn teacher_seed(&self, id: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(id as u64 + 1)
    }
}

/// Trains `config.count` teachers in parallel, each from its own seed, and
/// records their distributions on the train and validation splits.
pub fn train_teacher_ensemble(dataset: &Dataset, config: &TeacherConfig) -> Result<TeacherDistributions> {
    if config.count == 0 {
        return Err(Error::Config("teacher count must be at least 1".into()));
    }
    let teachers = (0..config.count)
        .into_par_iter()
        .map(|id| {
            train_one(dataset, config, id).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("teacher {id}: {msg}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherDistributions {
        class_count: dataset.class_count,
        teachers,
    })
}

fn train_one(dataset: &Dataset, config: &TeacherConfig, id: usize) -> Result<Teacher> {
    let seed = config.teacher_seed(id);
    let mut net = build_student(
        &config.setting,
        dataset.class_count,
        dataset.dim_count,
        config.filters,
        seed,
    )?;
    let mut opt = Optimizer::adam(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    for epoch in 1..=config.epochs {
        train_epoch(
            &mut net,
            &mut opt,
            &dataset.train,
            &[],
            &[],
            1.0,
            config.batch_size,
            &mut rng,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
            other => other,
        })?;
    }
    Ok(Teacher {
        id,
        provenance: Provenance::Trained,
        train: net.predict_proba(&dataset.train)?,
        validation: net.predict_proba(&dataset.validation)?,
    })
}

/// Elementwise mean of aligned distribution matrices.
pub fn ensemble_average(distributions: &[&[Vec<f64>]]) -> Result<Vec<Vec<f64>>> {
    let first = distributions
        .first()
        .ok_or_else(|| Error::Config("cannot average zero teachers".into()))?;
    let n = distributions.len() as f64;
    let mut out = vec![vec![0.0; first.first().map_or(0, Vec::len)]; first.len()];
    for d in distributions {
        if d.len() != out.len() || d.iter().any(|r| r.len() != out[0].len()) {
            return Err(Error::Data("teacher matrices are not aligned".into()));
        }
        for (acc, row) in out.iter_mut().zip(d.iter()) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    for row in &mut out {
        for a in row.iter_mut() {
            *a /= n;
        }
    }
    Ok(out)
}

/// Writes one distribution matrix as CSV with a `class_k` header and 9 decimals.
pub fn write_distribution_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let k = rows.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..k).map(|c| format!("class_{c}")))?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:.9}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a distribution CSV with `expected_rows` rows of `class_count` columns.
///
/// The header is optional. Rows whose sum is off by more than 1e-6 but
/// within 1e-3 are renormalized; anything further off is rejected.
pub fn import_teacher(path: &Path, expected_rows: usize, class_count: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    parse_distribution_csv(&text, expected_rows, class_count)
}

pub fn parse_distribution_csv(text: &str, expected_rows: usize, class_count: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 1;
        if i == 0 && record.iter().any(|f| f.starts_with("class_")) {
            continue;
        }
        let row: Vec<f64> = record
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("not a number: {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != class_count {
            return Err(Error::Parse {
                line,
                msg: format!("{} columns, expected {class_count}", row.len()),
            });
        }
        if let Some(bad) = row.iter().find(|p| **p < 0.0 || !p.is_finite()) {
            return Err(Error::Parse {
                line,
                msg: format!("invalid probability {bad}"),
            });
        }
        rows.push(normalize_row(row, line)?);
    }
    if rows.len() != expected_rows {
        return Err(Error::Data(format!(
            "distribution file has {} rows, dataset has {expected_rows}",
            rows.len()
        )));
    }
    Ok(rows)
}

fn normalize_row(mut row: Vec<f64>, line: usize) -> Result<Vec<f64>> {
    let sum: f64 = row.iter().sum();
    let off = (sum - 1.0).abs();
    if off <= ROW_SUM_EXACT {
        return Ok(row);
    }
    if off > ROW_SUM_BAND {
        return Err(Error::Parse {
            line,
            msg: format!("row {line} sums to {sum}, outside [0.999, 1.001]"),
        });
    }
    for p in &mut row {
        *p /= sum;
    }
    Ok(row)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub provenance: Provenance,
    pub train_file: String,
    pub val_file: String,
}

/// Index of a teacher directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherManifest {
    pub class_count: usize,
    pub train_rows: usize,
    pub val_rows: usize,
    pub teachers: Vec<ManifestEntry>,
    /// Effective configuration of the producing run.
    #[serde(default)]
    pub config: serde_json::Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn teacher_files(id: usize) -> (String, String) {
    (format!("teacher_{id}.train.csv"), format!("teacher_{id}.val.csv"))
}

/// Writes `teacher_<id>.{train,val}.csv` plus `manifest.json` into `dir`.
pub fn save_teachers(dir: &Path, teachers: &TeacherDistributions, config: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for t in &teachers.teachers {
        let (train_file, val_file) = teacher_files(t.id);
        write_distribution_csv(&dir.join(&train_file), &t.train)?;
        write_distribution_csv(&dir.join(&val_file), &t.validation)?;
        entries.push(ManifestEntry {
            id: t.id,
            provenance: t.provenance,
            train_file,
            val_file,
        });
    }
    let first = teachers
        .teachers
        .first()
        .ok_or_else(|| Error::Config("no teachers to save".into()))?;
    let manifest = TeacherManifest {
        class_count: teachers.class_count,
        train_rows: first.train.len(),
        val_rows: first.validation.len(),
        teachers: entries,
        config,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<TeacherManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every teacher listed in `dir/manifest.json`.
pub fn load_teachers(dir: &Path) -> Result<(TeacherManifest, TeacherDistributions)> {
    let manifest = load_manifest(dir)?;
    let resolve = |f: &str| -> PathBuf { dir.join(f) };
    let teachers = manifest
        .teachers
        .iter()
        .map(|e| {
            Ok(Teacher {
                id: e.id,
                provenance: e.provenance,
                train: import_teacher(&resolve(&e.train_file), manifest.train_rows, manifest.class_count)?,
                validation: import_teacher(&resolve(&e.val_file), manifest.val_rows, manifest.class_count)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        manifest.clone(),
        TeacherDistributions {
            class_count: manifest.class_count,
            teachers,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{separable_two_class, toy_dataset, ToySpec};
    use rand::Rng;

    fn quick_config(count: usize) -> TeacherConfig {
        let mut c = TeacherConfig::new(count, 1, 3).unwrap();
        c.setting = StudentSetting::uniform(1, BlockSetting::new(2, 10, 32)).unwrap();
        c.filters = 4;
        c
    }

    #[test]
    fn single_teacher_fits_separable_data() {
        let train = separable_two_class(20, 24, 1);
        let ds = Dataset::from_parts(train, Vec::new(), 2, 0.2, 1).unwrap();
        let mut c = quick_config(1);
        c.epochs = 200;
        let t = train_teacher_ensemble(&ds, &c).unwrap();
        let correct = t.teachers[0]
            .train
            .iter()
            .zip(&ds.train)
            .filter(|(p, s)| crate::models::argmax(p) == s.label)
            .count();
        assert!(correct as f64 / ds.train.len() as f64 >= 0.95);
    }

    #[test]
    fn teachers_differ_by_seed_and_zero_is_rejected() {
        let ds = toy_dataset(&ToySpec::default(), 0.2).unwrap();
        let mut c = quick_config(2);
        c.epochs = 3;
        let t = train_teacher_ensemble(&ds, &c).unwrap();
        t.validate(&ds).unwrap();
        assert_ne!(t.teachers[0].train, t.teachers[1].train);
        assert_eq!(train_teacher_ensemble(&ds, &c).unwrap(), t);
        c.count = 0;
        assert!(train_teacher_ensemble(&ds, &c).is_err());
    }

    #[test]
    fn import_examples() {
        let rows = parse_distribution_csv("0.6,0.4\n0.1,0.9", 2, 2).unwrap();
        assert_eq!(rows, vec![vec![0.6, 0.4], vec![0.1, 0.9]]);

        let rows = parse_distribution_csv("class_0,class_1\n0.6,0.4005\n", 1, 2).unwrap();
        assert!((rows[0].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((rows[0][0] - 0.6 / 1.0005).abs() < 1e-15);

        let err = parse_distribution_csv("0.6,0.4\n0.25,0.25\n", 2, 2).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        assert!(parse_distribution_csv("0.6,0.4\n", 2, 2).is_err());
        assert!(parse_distribution_csv("1.1,-0.1\n", 1, 2).is_err());
    }

    #[test]
    fn averaging_examples() {
        let q1 = vec![vec![1.0, 0.0]];
        let q2 = vec![vec![0.0, 1.0]];
        assert_eq!(ensemble_average(&[&q1, &q2]).unwrap(), vec![vec![0.5, 0.5]]);
        assert_eq!(ensemble_average(&[&q1]).unwrap(), q1);
        assert_eq!(ensemble_average(&[&q2, &q2, &q2]).unwrap(), q2);
        assert!(ensemble_average(&[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mats: Vec<Vec<Vec<f64>>> = (0..5)
            .map(|_| {
                (0..7)
                    .map(|_| {
                        let raw: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
                        let s: f64 = raw.iter().sum();
                        raw.iter().map(|v| v / s).collect()
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<&[Vec<f64>]> = mats.iter().map(Vec::as_slice).collect();
        let avg = ensemble_average(&refs).unwrap();
        for r in 0..7 {
            for c in 0..3 {
                let direct = (mats[0][r][c] + mats[1][r][c] + mats[2][r][c] + mats[3][r][c] + mats[4][r][c]) / 5.0;
                assert!((avg[r][c] - direct).abs() < 1e-12);
            }
            assert!((avg[r].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_round_trip_at_printed_precision() {
        let ds = toy_dataset(&ToySpec::default(), 0.2).unwrap();
        let mut c = quick_config(2);
        c.epochs = 2;
        let t = train_teacher_ensemble(&ds, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_teachers(dir.path(), &t, serde_json::json!({"seed": 3})).unwrap();
        let (manifest, back) = load_teachers(dir.path()).unwrap();
        assert_eq!(manifest.teachers.len(), 2);
        for (a, b) in t.teachers.iter().zip(&back.teachers) {
            for (ra, rb) in a.train.iter().zip(&b.train) {
                for (x, y) in ra.iter().zip(rb) {
                    assert_eq!(format!("{x:.9}"), format!("{y:.9}"));
                }
            }
        }
        // a second save of the loaded copy is byte-identical
        let dir2 = tempfile::tempdir().unwrap();
        save_teachers(dir2.path(), &back, serde_json::json!({"seed": 3})).unwrap();
        for f in ["teacher_0.train.csv", "teacher_1.val.csv", MANIFEST_FILE] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap()
            );
        }
    }
}
