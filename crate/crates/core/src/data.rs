//! UCR-format loading, z-normalization and validation splitting.
//!
//! A UCR file holds one series per line: the class label first, then the
//! observations. Multivariate sets are stored as one file per dimension,
//! `<stem>_dim<k>.tsv` for `k = 1..M`, with aligned row order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One labeled series: `values[m]` holds dimension `m` over time.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    pub values: Vec<Vec<f64>>,
    pub label: usize,
}

impl LabeledSeries {
    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<LabeledSeries>,
    pub validation: Vec<LabeledSeries>,
    pub test: Vec<LabeledSeries>,
    pub class_count: usize,
    pub dim_count: usize,
    /// Original label text for each encoded class index.
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from already-encoded series, splitting validation off `train`.
    pub fn from_parts(
        train: Vec<LabeledSeries>,
        test: Vec<LabeledSeries>,
        class_count: usize,
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let dim_count = train
            .first()
            .ok_or_else(|| Error::Data("no records".into()))?
            .dims();
        for s in train.iter().chain(&test) {
            if s.dims() != dim_count {
                return Err(Error::Data(format!(
                    "series with {} dims in a {dim_count}-dim dataset",
                    s.dims()
                )));
            }
            if s.label >= class_count {
                return Err(Error::Data(format!("label {} >= class count {class_count}", s.label)));
            }
        }
        let (train, validation) = split_validation(&train, val_fraction, seed)?;
        Ok(Dataset {
            train,
            validation,
            test,
            class_count,
            dim_count,
            class_names: (0..class_count).map(|c| c.to_string()).collect(),
        })
    }

    /// Loads train (and optionally test) files, z-normalizes every series and
    /// splits `val_fraction` of the training portion off as validation.
    pub fn load(train: &Path, test: Option<&Path>, val_fraction: f64, seed: u64) -> Result<Self> {
        let raw_train = read_raw(train)?;
        let raw_test = match test {
            Some(p) => read_raw(p)?,
            None => Vec::new(),
        };
        let encoder = LabelEncoder::fit(raw_train.iter().chain(&raw_test).map(|r| r.label.as_str()));
        let encode = |rows: Vec<RawRecord>| -> Vec<LabeledSeries> {
            rows.into_iter()
                .map(|r| {
                    let mut s = LabeledSeries {
                        label: encoder.encode(&r.label),
                        values: r.values,
                    };
                    znormalize(&mut s);
                    s
                })
                .collect()
        };
        let train_series = encode(raw_train);
        let test_series = encode(raw_test);
        let mut ds = Self::from_parts(
            train_series,
            test_series,
            encoder.classes.len(),
            val_fraction,
            seed,
        )?;
        ds.class_names = encoder.classes;
        Ok(ds)
    }
}

#[derive(Debug)]
struct RawRecord {
    label: String,
    values: Vec<Vec<f64>>,
}

struct LabelEncoder {
    classes: Vec<String>,
}

impl LabelEncoder {
    /// Classes ordered numerically when every label parses as a number,
    /// lexicographically otherwise.
    fn fit<'a>(labels: impl Iterator<Item = &'a str>) -> Self {
        let mut uniq: Vec<String> = labels
            .map(str::to_owned)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let numeric: Option<Vec<f64>> = uniq.iter().map(|l| l.parse::<f64>().ok()).collect();
        if let Some(nums) = numeric {
            let mut paired: Vec<(f64, String)> = nums.into_iter().zip(uniq).collect();
            paired.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            uniq = paired.into_iter().map(|(_, l)| l).collect();
        }
        LabelEncoder { classes: uniq }
    }

    fn encode(&self, label: &str) -> usize {
        self.classes
            .iter()
            .position(|c| c == label)
            .expect("label seen during fit")
    }
}

/// Parses one univariate UCR file; labels are re-encoded to `0..K-1`.
pub fn parse_ucr(path: &Path) -> Result<Vec<LabeledSeries>> {
    let text = std::fs::read_to_string(path)?;
    parse_ucr_str(&text)
}

pub fn parse_ucr_str(text: &str) -> Result<Vec<LabeledSeries>> {
    let rows = parse_rows(text)?;
    let encoder = LabelEncoder::fit(rows.iter().map(|r| r.0.as_str()));
    Ok(rows
        .into_iter()
        .map(|(label, values)| LabeledSeries {
            label: encoder.encode(&label),
            values: vec![values],
        })
        .collect())
}

fn parse_rows(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();
    let first = match lines.peek() {
        Some((_, l)) => *l,
        None => return Err(Error::Data("no records".into())),
    };
    let delim = if first.contains('\t') {
        Some('\t')
    } else if first.contains(',') {
        Some(',')
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut width = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = match delim {
            Some(d) => line.trim().split(d).map(str::trim).collect(),
            None => line.split_whitespace().collect(),
        };
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected a label followed by at least one value".into(),
            });
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("ragged row: {} fields, expected {w}", fields.len()),
                })
            }
            _ => {}
        }
        let label = normalize_label(fields[0]);
        let mut values = Vec::with_capacity(fields.len() - 1);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("non-numeric field {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite value {f:?}"),
                });
            }
            values.push(v);
        }
        rows.push((label, values));
    }
    Ok(rows)
}

/// "1.0" and "1" name the same class in UCR files.
fn normalize_label(raw: &str) -> String {
    match raw.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.abs() < 1e15 => format!("{}", v as i64),
        _ => raw.to_string(),
    }
}

/// Path of dimension `k` (1-based) of a multivariate stem.
pub fn dimension_path(stem: &Path, k: usize) -> PathBuf {
    let mut name = stem.as_os_str().to_owned();
    name.push(format!("_dim{k}.tsv"));
    PathBuf::from(name)
}

fn read_raw(path: &Path) -> Result<Vec<RawRecord>> {
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        return Ok(parse_rows(&text)?
            .into_iter()
            .map(|(label, v)| RawRecord {
                label,
                values: vec![v],
            })
            .collect());
    }
    let mut per_dim = Vec::new();
    for k in 1.. {
        let p = dimension_path(path, k);
        if !p.is_file() {
            break;
        }
        let text = std::fs::read_to_string(&p)?;
        per_dim.push(parse_rows(&text).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("{}: {msg}", p.display()),
            },
            other => other,
        })?);
    }
    if per_dim.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} (nor {})", path.display(), dimension_path(path, 1).display()),
        )));
    }
    let rows = per_dim[0].len();
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let label = per_dim[0][i].0.clone();
        let mut values = Vec::with_capacity(per_dim.len());
        for (d, dim) in per_dim.iter().enumerate() {
            let (l, v) = dim.get(i).ok_or_else(|| {
                Error::Data(format!("dimension {} has fewer rows than dimension 1", d + 1))
            })?;
            if *l != label {
                return Err(Error::Data(format!(
                    "row {}: label {l:?} in dimension {} disagrees with {label:?}",
                    i + 1,
                    d + 1
                )));
            }
            values.push(v.clone());
        }
        out.push(RawRecord { label, values });
    }
    if per_dim.iter().any(|d| d.len() != rows) {
        return Err(Error::Data("dimension files have different row counts".into()));
    }
    Ok(out)
}

/// Splits `fraction` of `train` into a validation set.
///
/// Stratified by class when every class has at least two samples. Both
/// outputs keep the input order.
pub fn split_validation(
    train: &[LabeledSeries],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSeries>, Vec<LabeledSeries>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {fraction} not in (0, 1)")));
    }
    let n = train.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 samples to split, got {n}")));
    }
    let target = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let stratify = by_class.values().all(|v| v.len() >= 2);

    let mut chosen = Vec::with_capacity(target);
    if stratify {
        // largest-remainder allocation, never emptying a class
        let mut alloc: Vec<(usize, usize, f64)> = by_class
            .iter()
            .map(|(&c, idx)| {
                let exact = idx.len() as f64 * fraction;
                let base = (exact.floor() as usize).min(idx.len() - 1);
                (c, base, exact - base as f64)
            })
            .collect();
        let mut assigned: usize = alloc.iter().map(|a| a.1).sum();
        let mut order: Vec<usize> = (0..alloc.len()).collect();
        order.sort_by(|&a, &b| alloc[b].2.total_cmp(&alloc[a].2).then(a.cmp(&b)));
        for &i in order.iter().cycle().take(order.len() * 2) {
            if assigned >= target {
                break;
            }
            let cap = by_class[&alloc[i].0].len() - 1;
            if alloc[i].1 < cap {
                alloc[i].1 += 1;
                assigned += 1;
            }
        }
        for (c, k, _) in alloc {
            let mut idx = by_class[&c].clone();
            idx.shuffle(&mut rng);
            chosen.extend_from_slice(&idx[..k]);
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..target]);
    }

    let mut is_val = vec![false; n];
    for i in chosen {
        is_val[i] = true;
    }
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (s, v) in train.iter().zip(is_val) {
        if v {
            va.push(s.clone());
        } else {
            tr.push(s.clone());
        }
    }
    Ok((tr, va))
}

/// Per-dimension z-normalization (population std). Dimensions with
/// std below 1e-8 are only centred.
pub fn znormalize(series: &mut LabeledSeries) {
    for dim in &mut series.values {
        let n = dim.len() as f64;
        let mean = dim.iter().sum::<f64>() / n;
        let var = dim.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        for v in dim.iter_mut() {
            *v -= mean;
            if std >= 1e-8 {
                *v /= std;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn series(label: usize) -> LabeledSeries {
        LabeledSeries {
            values: vec![vec![label as f64, 1.0]],
            label,
        }
    }

    #[test]
    fn parses_tab_file() {
        let s = parse_ucr_str("1\t0.5\t0.7\n2\t0.1\t0.2").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].label, s[1].label), (0, 1));
        assert_eq!(s[0].values, vec![vec![0.5, 0.7]]);
        assert_eq!(s[1].len(), 2);
    }

    #[test]
    fn parses_comma_file() {
        let s = parse_ucr_str("-1,3,4,5\n1,0,0,1\n").unwrap();
        assert_eq!(s[0].label, 0);
        assert_eq!(s[1].values[0], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_file_has_no_records() {
        let err = parse_ucr_str("\n\n").unwrap_err();
        assert!(err.to_string().contains("no records"));
    }

    #[test]
    fn labels_are_reencoded_contiguously() {
        let s = parse_ucr_str("3\t1\n7\t2\n3\t3\n").unwrap();
        let labels: Vec<usize> = s.iter().map(|x| x.label).collect();
        assert_eq!(labels, vec![0, 1, 0]);
    }

    #[test]
    fn ragged_row_reports_line() {
        match parse_ucr_str("1\t1\t2\n2\t1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_is_parse_error() {
        assert!(matches!(
            parse_ucr_str("1\t1\tabc\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn split_sizes() {
        let data: Vec<_> = (0..10).map(|i| series(i % 2)).collect();
        let (tr, va) = split_validation(&data, 0.2, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
    }

    #[test]
    fn split_is_deterministic() {
        let data: Vec<_> = (0..37)
            .map(|i| LabeledSeries {
                values: vec![vec![i as f64]],
                label: i % 3,
            })
            .collect();
        let a = split_validation(&data, 0.2, 9).unwrap();
        let b = split_validation(&data, 0.2, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stratified_split_balances_classes() {
        let data: Vec<_> = (0..100)
            .map(|i| LabeledSeries {
                values: vec![vec![i as f64]],
                label: i % 4,
            })
            .collect();
        let (tr, va) = split_validation(&data, 0.2, 1).unwrap();
        assert_eq!(va.len(), 20);
        for c in 0..4 {
            assert_eq!(va.iter().filter(|s| s.label == c).count(), 5);
        }
        // disjoint and covering
        let mut ids: Vec<i64> = tr.iter().chain(&va).map(|s| s.values[0][0] as i64).collect();
        ids.sort();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn singleton_class_falls_back_to_plain_shuffle() {
        let mut data: Vec<_> = (0..9).map(|_| series(0)).collect();
        data.push(series(1));
        let (tr, va) = split_validation(&data, 0.2, 4).unwrap();
        assert_eq!(tr.len() + va.len(), 10);
        assert_eq!(va.len(), 2);
    }

    #[test]
    fn split_needs_two_samples() {
        assert!(split_validation(&[series(0)], 0.2, 0).is_err());
        assert!(split_validation(&[series(0), series(1)], 1.0, 0).is_err());
    }

    #[test]
    fn znormalize_basic_and_constant() {
        let mut s = LabeledSeries {
            values: vec![vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0]],
            label: 0,
        };
        znormalize(&mut s);
        let d0 = &s.values[0];
        let mean: f64 = d0.iter().sum::<f64>() / 3.0;
        let std = (d0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-12);
        assert_eq!(s.values[1], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn znormalize_random_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let len = rng.gen_range(5..200);
            let scale = rng.gen_range(0.01..100.0);
            let mut s = LabeledSeries {
                values: vec![(0..len).map(|_| rng.gen_range(-scale..scale) + 40.0).collect()],
                label: 0,
            };
            znormalize(&mut s);
            let d = &s.values[0];
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-9);
            assert!((std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn multivariate_files_and_shared_label_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("toy_TRAIN");
        std::fs::write(dimension_path(&stem, 1), "5\t1\t2\t3\n9\t3\t2\t1\n5\t0\t0\t1\n9\t1\t0\t0\n").unwrap();
        std::fs::write(dimension_path(&stem, 2), "5\t1\t1\t3\n9\t3\t3\t1\n5\t2\t0\t1\n9\t1\t5\t0\n").unwrap();
        let test = dir.path().join("toy_TEST.tsv");
        std::fs::write(&test, "9\t1\t2\t3\n").unwrap();
        let err = Dataset::load(&stem, Some(&test), 0.5, 0).unwrap_err();
        assert!(err.to_string().contains("dims"), "{err}");

        std::fs::write(dimension_path(&dir.path().join("toy_TEST"), 1), "9\t1\t2\t3\n").unwrap();
        std::fs::write(dimension_path(&dir.path().join("toy_TEST"), 2), "9\t1\t2\t4\n").unwrap();
        let ds = Dataset::load(&stem, Some(&dir.path().join("toy_TEST")), 0.5, 0).unwrap();
        assert_eq!(ds.dim_count, 2);
        assert_eq!(ds.class_count, 2);
        assert_eq!(ds.class_names, vec!["5", "9"]);
        assert_eq!(ds.test[0].label, 1);
        assert_eq!(ds.train.len() + ds.validation.len(), 4);
    }
}
