//! Gaussian process regression with a squared exponential kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Base diagonal jitter, relative to the signal variance.
pub const JITTER: f64 = 1e-6;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-2;

/// `θ_f · exp(-‖a - b‖² / (2Θ²))`.
pub fn se_kernel(a: &[f64], b: &[f64], theta_f: f64, length_scale: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    theta_f * (-d2 / (2.0 * length_scale * length_scale)).exp()
}

/// Ten log-spaced values from `lo` to `hi` inclusive.
fn log_grid(lo: f64, hi: f64) -> [f64; 10] {
    let (a, b) = (lo.ln(), hi.ln());
    std::array::from_fn(|i| (a + (b - a) * i as f64 / 9.0).exp())
}

pub fn signal_variance_grid() -> [f64; 10] {
    log_grid(0.01, 1.0)
}

pub fn length_scale_grid() -> [f64; 10] {
    log_grid(0.1, 10.0)
}

#[derive(Clone, Debug)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    pub target_mean: f64,
    pub theta_f: f64,
    pub length_scale: f64,
    /// Relative jitter actually used; the diagonal gets `jitter · θ_f`.
    pub jitter: f64,
    pub log_marginal_likelihood: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn check_inputs(z: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::Config("a Gaussian process needs at least one point".into()));
    }
    if z.len() != y.len() {
        return Err(Error::Config(format!("{} inputs but {} targets", z.len(), y.len())));
    }
    let d = z[0].len();
    if z.iter().any(|r| r.len() != d) {
        return Err(Error::Config("inputs have differing dimensions".into()));
    }
    if z.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Gaussian process inputs must be finite".into()));
    }
    Ok(())
}

/// Fits with fixed hyperparameters, escalating jitter until the kernel
/// matrix factorizes.
pub fn gp_fit_with(z: &[Vec<f64>], y: &[f64], theta_f: f64, length_scale: f64) -> Result<GpModel> {
    check_inputs(z, y)?;
    if !(theta_f > 0.0 && length_scale > 0.0) {
        return Err(Error::Config(format!(
            "kernel parameters must be positive, got θ_f={theta_f}, Θ={length_scale}"
        )));
    }
    let n = z.len();
    let kernel = DMatrix::from_fn(n, n, |i, j| se_kernel(&z[i], &z[j], theta_f, length_scale));
    let mean = y.iter().sum::<f64>() / n as f64;
    let centered = DVector::from_iterator(n, y.iter().map(|v| v - mean));
    let mut jitter = JITTER;
    loop {
        let mut k = kernel.clone();
        for i in 0..n {
            k[(i, i)] += jitter * theta_f;
        }
        if let Some(chol) = k.cholesky() {
            let alpha = chol.solve(&centered);
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
            let lml = -0.5 * centered.dot(&alpha) - log_det - 0.5 * n as f64 * std::f64::consts::TAU.ln();
            return Ok(GpModel {
                inputs: z.to_vec(),
                target_mean: mean,
                theta_f,
                length_scale,
                jitter,
                log_marginal_likelihood: lml,
                chol,
                alpha,
            });
        }
        jitter *= 10.0;
        if jitter > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::Linalg(format!(
                "kernel matrix is not positive definite even with jitter {MAX_JITTER}"
            )));
        }
    }
}

/// Fits a GP, choosing `(θ_f, Θ)` on a 10x10 grid by log marginal likelihood.
pub fn gp_fit(z: &[Vec<f64>], y: &[f64]) -> Result<GpModel> {
    check_inputs(z, y)?;
    let mut best: Option<GpModel> = None;
    let mut last_err = None;
    for theta_f in signal_variance_grid() {
        for length_scale in length_scale_grid() {
            match gp_fit_with(z, y, theta_f, length_scale) {
                Ok(m) => {
                    if best
                        .as_ref()
                        .is_none_or(|b| m.log_marginal_likelihood > b.log_marginal_likelihood)
                    {
                        best = Some(m);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
    }
    best.ok_or_else(|| last_err.expect("grid is non-empty"))
}

impl GpModel {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn cross(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.inputs.len(),
            self.inputs
                .iter()
                .map(|z| se_kernel(z, x, self.theta_f, self.length_scale)),
        )
    }
}

/// Posterior mean and variance at `x`; the variance is clamped at zero.
pub fn gp_posterior(model: &GpModel, x: &[f64]) -> (f64, f64) {
    let k = model.cross(x);
    let mu = model.target_mean + k.dot(&model.alpha);
    let v = model
        .chol
        .l_dirty()
        .solve_lower_triangular(&k)
        .expect("cholesky factor has a positive diagonal");
    let var = (model.theta_f - v.dot(&v)).max(0.0);
    (mu, var)
}

/// Scalarized objective `(mean_g, std_g)` for accuracy `N(μ, σ²)` and a
/// size normalized by `size_max`.
pub fn joint_objective(mu: f64, var: f64, size_bits: u64, beta: f64, size_max: u64) -> (f64, f64) {
    let s = size_bits as f64 / size_max as f64;
    (beta * mu - (1.0 - beta) * s, beta * var.max(0.0).sqrt())
}

/// Closed-form expected improvement over `best`.
pub fn expected_improvement(mean: f64, std: f64, best: f64) -> f64 {
    let delta = mean - best;
    if std <= 0.0 {
        return delta.max(0.0);
    }
    let n = Normal::standard();
    let u = delta / std;
    (delta * n.cdf(u) + std * n.pdf(u)).max(0.0)
}
