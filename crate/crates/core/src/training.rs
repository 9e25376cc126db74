//! Minibatch training of a student against labels and weighted soft targets.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Optimizer, Tensor, Var};
use crate::data::LabeledSeries;
use crate::error::{Error, Result};
use crate::models::{batch_tensor, StudentNetwork};

/// Soft targets for one teacher: one probability row per training series.
pub(crate) type Rows = [Vec<f64>];

/// Shuffled index batches covering `0..n`.
pub(crate) fn minibatches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn gather(rows: &Rows, idx: &[usize]) -> Result<Tensor> {
    let k = rows[0].len();
    let mut data = Vec::with_capacity(idx.len() * k);
    for &i in idx {
        data.extend_from_slice(&rows[i]);
    }
    Tensor::new(vec![idx.len(), k], data)
}

/// `alpha * CE(p, y) + (1 - alpha) * sum_i weights[i] * KL(targets[i] || p)` on `g`.
pub(crate) fn weighted_kd_loss(
    g: &mut Graph,
    probs: Var,
    labels: &[usize],
    targets: Vec<Tensor>,
    weights: &[f64],
    alpha: f64,
) -> Result<Var> {
    let ce = g.cross_entropy(probs, labels)?;
    let mut loss = g.scale(ce, alpha);
    if alpha < 1.0 {
        for (t, &w) in targets.into_iter().zip(weights) {
            let kl = g.kl_div(t, probs)?;
            let term = g.scale(kl, (1.0 - alpha) * w);
            loss = g.add(loss, term)?;
        }
    }
    Ok(loss)
}

/// One pass over `series` in shuffled minibatches. Returns the mean batch loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_epoch(
    net: &mut StudentNetwork,
    opt: &mut Optimizer,
    series: &[LabeledSeries],
    targets: &[&Rows],
    weights: &[f64],
    alpha: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let batches = minibatches(series.len(), batch_size, rng);
    let mut total = 0.0;
    for idx in &batches {
        let refs: Vec<&LabeledSeries> = idx.iter().map(|&i| &series[i]).collect();
        let labels: Vec<usize> = refs.iter().map(|s| s.label).collect();
        let mut g = Graph::new();
        let x = g.constant(batch_tensor(&refs)?);
        let f = net.forward(&mut g, x)?;
        let t = targets
            .iter()
            .map(|rows| gather(rows, idx))
            .collect::<Result<Vec<_>>>()?;
        let loss = weighted_kd_loss(&mut g, f.probs, &labels, t, weights, alpha)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {value}")));
        }
        g.backward(loss)?;
        let grads = f
            .params
            .iter()
            .map(|&p| g.grad(p))
            .collect::<Result<Vec<_>>>()?;
        opt.step(&mut net.parameters_mut(), &grads)?;
        total += value;
    }
    Ok(total / batches.len() as f64)
}
