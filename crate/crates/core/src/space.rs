//! The student-setting search space, dominance, and Pareto frontiers.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    model_size_bits, BlockSetting, StudentSetting, BIT_CHOICES, FILTER_CHOICES, LAYER_CHOICES,
};

/// Settings per block: `|L| * |F| * |W|`.
pub const BLOCK_CHOICES: u64 = (LAYER_CHOICES.len() * FILTER_CHOICES.len() * BIT_CHOICES.len()) as u64;

/// Number of distinct settings with `blocks` blocks.
pub fn space_cardinality(blocks: usize) -> Result<u64> {
    if blocks == 0 {
        return Err(Error::Config("block count must be at least 1".into()));
    }
    BLOCK_CHOICES
        .checked_pow(blocks as u32)
        .ok_or_else(|| Error::Config(format!("search space with {blocks} blocks overflows u64")))
}

/// Setting number `index` in mixed-radix order (block 0 most significant).
pub fn setting_from_index(mut index: u64, blocks: usize) -> Result<StudentSetting> {
    let card = space_cardinality(blocks)?;
    if index >= card {
        return Err(Error::Config(format!("setting index {index} outside a space of {card}")));
    }
    let mut out = vec![BlockSetting::new(0, 0, 0); blocks];
    for slot in out.iter_mut().rev() {
        let b = index % BLOCK_CHOICES;
        index /= BLOCK_CHOICES;
        let (nf, nw) = (FILTER_CHOICES.len() as u64, BIT_CHOICES.len() as u64);
        *slot = BlockSetting::new(
            LAYER_CHOICES[(b / (nf * nw)) as usize],
            FILTER_CHOICES[((b / nw) % nf) as usize],
            BIT_CHOICES[(b % nw) as usize],
        );
    }
    StudentSetting::new(out)
}

/// Inverse of [`setting_from_index`].
pub fn setting_index(setting: &StudentSetting) -> Result<u64> {
    setting.validate()?;
    let pos = |choices: &[u32], v: u32| choices.iter().position(|c| *c == v).expect("validated") as u64;
    let (nf, nw) = (FILTER_CHOICES.len() as u64, BIT_CHOICES.len() as u64);
    Ok(setting.blocks.iter().fold(0u64, |acc, b| {
        acc * BLOCK_CHOICES
            + pos(&LAYER_CHOICES, b.layers) * nf * nw
            + pos(&FILTER_CHOICES, b.filter_length) * nw
            + pos(&BIT_CHOICES, b.bits)
    }))
}

/// Every setting with `blocks` blocks, in index order.
pub fn all_settings(blocks: usize) -> Result<Vec<StudentSetting>> {
    let card = space_cardinality(blocks)?;
    if card > 10_000_000 {
        return Err(Error::Config(format!("refusing to enumerate {card} settings")));
    }
    (0..card).map(|i| setting_from_index(i, blocks)).collect()
}

/// `count` distinct settings drawn uniformly without replacement.
pub fn sample_settings(count: usize, blocks: usize, seed: u64) -> Result<Vec<StudentSetting>> {
    let card = space_cardinality(blocks)?;
    if count as u64 > card {
        return Err(Error::Config(format!(
            "cannot draw {count} distinct settings from a space of {card}"
        )));
    }
    let card = usize::try_from(card)
        .map_err(|_| Error::Config(format!("search space of {card} settings is too large to index")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, card, count)
        .into_iter()
        .map(|i| setting_from_index(i as u64, blocks))
        .collect()
}

/// Largest model size over the legal space (every block at its maximum).
pub fn size_max(blocks: usize, class_count: usize, input_dims: usize, filters: usize) -> Result<u64> {
    let top = BlockSetting::new(
        *LAYER_CHOICES.last().expect("non-empty"),
        *FILTER_CHOICES.last().expect("non-empty"),
        *BIT_CHOICES.last().expect("non-empty"),
    );
    let setting = StudentSetting::uniform(blocks, top)?;
    Ok(model_size_bits(&setting, class_count, input_dims, filters))
}

/// Euclidean distance between the flattened raw `(L, F, W)` values.
pub fn setting_distance_original(a: &StudentSetting, b: &StudentSetting) -> Result<f64> {
    if a.block_count() != b.block_count() {
        return Err(Error::Config(format!(
            "settings have {} and {} blocks",
            a.block_count(),
            b.block_count()
        )));
    }
    Ok(a.raw_values()
        .iter()
        .zip(b.raw_values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Anything with an accuracy to maximize and a size to minimize.
pub trait Objectives {
    fn accuracy(&self) -> f64;
    fn size_bits(&self) -> u64;
}

impl Objectives for (f64, u64) {
    fn accuracy(&self) -> f64 {
        self.0
    }
    fn size_bits(&self) -> u64 {
        self.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedSetting {
    pub setting: StudentSetting,
    pub accuracy: f64,
    pub size_bits: u64,
}

impl Objectives for EvaluatedSetting {
    fn accuracy(&self) -> f64 {
        self.accuracy
    }
    fn size_bits(&self) -> u64 {
        self.size_bits
    }
}

/// Whether `a` dominates `b`: more accurate and not larger, or smaller and not less accurate.
pub fn dominates<A: Objectives, B: Objectives>(a: &A, b: &B) -> bool {
    let (acc2, size2, acc1, size1) = (a.accuracy(), a.size_bits(), b.accuracy(), b.size_bits());
    (acc2 > acc1 && size2 <= size1) || (size2 < size1 && acc2 >= acc1)
}

/// The non-dominated points, sorted by size ascending. Exact duplicates are all kept.
pub fn pareto_frontier<T: Objectives + Clone>(points: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    // size ascending, accuracy descending: a point can only be dominated by an earlier one
    order.sort_by(|&i, &j| {
        points[i]
            .size_bits()
            .cmp(&points[j].size_bits())
            .then(points[j].accuracy().total_cmp(&points[i].accuracy()))
    });
    let mut out: Vec<T> = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_size = 0u64;
    for i in order {
        let p = &points[i];
        let (acc, size) = (p.accuracy(), p.size_bits());
        let duplicate = out
            .last()
            .is_some_and(|l| l.accuracy() == acc && l.size_bits() == size);
        if acc > best_acc || duplicate {
            if acc > best_acc {
                best_acc = acc;
                best_size = size;
            }
            out.push(p.clone());
        } else {
            debug_assert!(best_size <= size);
        }
    }
    out
}

/// Area dominated by `points` inside `[0, size_max] x [0, 1]`, as a fraction
/// of `size_max`. Reference point: accuracy 0, size `size_max`.
pub fn hypervolume<T: Objectives + Clone>(points: &[T], size_max: u64) -> f64 {
    let front: Vec<T> = pareto_frontier(points)
        .into_iter()
        .filter(|p| p.size_bits() <= size_max && p.accuracy() > 0.0)
        .collect();
    let mut area = 0.0;
    for (i, p) in front.iter().enumerate() {
        let next = front.get(i + 1).map_or(size_max, |n| n.size_bits());
        area += p.accuracy() * (next - p.size_bits()) as f64;
    }
    area / size_max as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Initial,
    Searched,
}

/// One line of `frontier.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    /// Setting as a JSON array string, e.g. `[[3,20,8]]`.
    pub setting: String,
    pub accuracy: f64,
    pub size_bits: u64,
    pub phase: Phase,
}

impl FrontierRow {
    pub fn new(point: &EvaluatedSetting, phase: Phase) -> Self {
        FrontierRow {
            setting: point.setting.to_json(),
            accuracy: point.accuracy,
            size_bits: point.size_bits,
            phase,
        }
    }
}

impl Objectives for FrontierRow {
    fn accuracy(&self) -> f64 {
        self.accuracy
    }
    fn size_bits(&self) -> u64 {
        self.size_bits
    }
}

pub fn write_frontier_csv(path: &Path, rows: &[FrontierRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_frontier_csv(path: &Path) -> Result<Vec<FrontierRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<FrontierRow>, _>>()?;
    for row in &rows {
        StudentSetting::from_json(&row.setting)?;
    }
    Ok(rows)
}
