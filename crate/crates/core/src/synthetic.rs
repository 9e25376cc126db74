//! Small generated datasets for tests, demos and desk-scale runs.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{znormalize, Dataset, LabeledSeries};
use crate::error::Result;
use crate::teachers::{Provenance, Teacher};

/// Shape of a generated toy problem.
#[derive(Clone, Debug)]
pub struct ToySpec {
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub length: usize,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            per_class_train: 30,
            per_class_test: 20,
            length: 32,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Sum of 12 uniforms minus 6: zero mean, unit variance.
fn approx_normal(rng: &mut ChaCha8Rng) -> f64 {
    (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0
}

fn toy_series(rng: &mut ChaCha8Rng, class: usize, spec: &ToySpec) -> LabeledSeries {
    let n = spec.length;
    let cycles = [2.0, 5.0, 3.5][class % 3];
    let period = n as f64 / (cycles * rng.gen_range(0.85..1.15));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.8..1.2);
    let values = (0..n)
        .map(|t| {
            let x = std::f64::consts::TAU * t as f64 / period + phase;
            let base = match class {
                0 => x.sin(),
                1 => x.sin().signum(),
                _ => 2.0 * ((x / std::f64::consts::TAU).fract() - 0.5),
            };
            amp * base + spec.noise * approx_normal(rng)
        })
        .collect();
    let mut s = LabeledSeries {
        values: vec![values],
        label: class,
    };
    znormalize(&mut s);
    s
}

fn balanced(rng: &mut ChaCha8Rng, classes: usize, per_class: usize, spec: &ToySpec) -> Vec<LabeledSeries> {
    (0..per_class)
        .flat_map(|_| (0..classes).collect::<Vec<_>>())
        .map(|c| toy_series(rng, c, spec))
        .collect()
}

/// Three classes (sine, square and sawtooth waves, each with its own
/// jittered frequency, random phase and amplitude, plus noise) as `(train, test)`.
pub fn toy_three_class(spec: &ToySpec) -> (Vec<LabeledSeries>, Vec<LabeledSeries>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = balanced(&mut rng, 3, spec.per_class_train, spec);
    let test = balanced(&mut rng, 3, spec.per_class_test, spec);
    (train, test)
}

/// Toy three-class dataset with `val_fraction` of the training part held out.
pub fn toy_dataset(spec: &ToySpec, val_fraction: f64) -> Result<Dataset> {
    let (train, test) = toy_three_class(spec);
    Dataset::from_parts(train, test, 3, val_fraction, spec.seed)
}

/// Two classes separated by the sign of a constant offset.
pub fn separable_two_class(per_class: usize, length: usize, seed: u64) -> Vec<LabeledSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2 * per_class)
        .map(|i| {
            let label = i % 2;
            let offset = if label == 0 { -1.0 } else { 1.0 };
            LabeledSeries {
                values: vec![(0..length)
                    .map(|_| offset + 0.3 * approx_normal(&mut rng))
                    .collect()],
                label,
            }
        })
        .collect()
}

fn label_rows(series: &[LabeledSeries], classes: usize, confidence: f64, flip: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    series
        .iter()
        .map(|s| {
            let target = if rng.gen::<f64>() < flip {
                rng.gen_range(0..classes)
            } else {
                s.label
            };
            let rest = (1.0 - confidence) / (classes - 1) as f64;
            (0..classes)
                .map(|c| if c == target { confidence } else { rest })
                .collect()
        })
        .collect()
}

/// A teacher that puts `confidence` on the true label, except for a random
/// `flip` fraction of samples where it picks a random class.
pub fn label_teacher(id: usize, dataset: &Dataset, confidence: f64, flip: f64, seed: u64) -> Teacher {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = dataset.class_count;
    Teacher {
        id,
        provenance: Provenance::Imported,
        train: label_rows(&dataset.train, k, confidence, flip, &mut rng),
        validation: label_rows(&dataset.validation, k, confidence, flip, &mut rng),
    }
}

fn simplex_rows(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
            let sum: f64 = e.iter().sum();
            e.iter().map(|v| v / sum).collect()
        })
        .collect()
}

/// A teacher whose rows are drawn uniformly from the probability simplex.
pub fn noise_teacher(id: usize, dataset: &Dataset, seed: u64) -> Teacher {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = dataset.class_count;
    Teacher {
        id,
        provenance: Provenance::Imported,
        train: simplex_rows(dataset.train.len(), k, &mut rng),
        validation: simplex_rows(dataset.validation.len(), k, &mut rng),
    }
}

/// Writes univariate series in UCR tab-separated format (label first).
pub fn write_ucr(path: &Path, series: &[LabeledSeries]) -> Result<()> {
    let mut out = String::new();
    for s in series {
        write!(out, "{}", s.label).expect("string write");
        for v in &s.values[0] {
            write!(out, "\t{v:?}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_ucr;

    #[test]
    fn toy_is_balanced_and_deterministic() {
        let spec = ToySpec::default();
        let (a, t) = toy_three_class(&spec);
        let (b, _) = toy_three_class(&spec);
        assert_eq!(a.len(), 90);
        assert_eq!(t.len(), 60);
        for c in 0..3 {
            assert_eq!(a.iter().filter(|s| s.label == c).count(), 30);
        }
        assert_eq!(a[5].values, b[5].values);
    }

    #[test]
    fn ucr_writer_round_trips() {
        let (train, _) = toy_three_class(&ToySpec::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy_TRAIN.tsv");
        write_ucr(&path, &train).unwrap();
        let back = parse_ucr(&path).unwrap();
        assert_eq!(back.len(), train.len());
        for (x, y) in back.iter().zip(&train) {
            assert_eq!(x.values, y.values);
            assert_eq!(x.label, y.label);
        }
    }
}
