use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::softmax;
use crate::error::{Error, Result};

/// Standard Gumbel samples `-ln(-ln u)`, `u ~ Uniform(0, 1)`.
pub fn gumbel_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `gamma_i = softmax((-lambda + gs) / tau)_i`.
pub fn gumbel_unimportance_with_noise(lambda: &[f64], gs: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if gs.len() != lambda.len() {
        return Err(Error::Config(format!("{} weights, {} noise values", lambda.len(), gs.len())));
    }
    let logits: Vec<f64> = lambda.iter().zip(gs).map(|(l, g)| (-l + g) / tau).collect();
    Ok(softmax(&logits))
}

/// Unimportance of each teacher under fresh Gumbel noise.
pub fn gumbel_unimportance(lambda: &[f64], tau: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let gs = gumbel_noise(lambda.len(), rng);
    gumbel_unimportance_with_noise(lambda, &gs, tau)
}

/// Importance weights `softmax(-gamma)`.
pub fn reparam_importance(gamma: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = gamma.iter().map(|g| -g).collect();
    softmax(&neg)
}
