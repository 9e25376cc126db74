//! Two-phase setting encoder.
//!
//! `Φ` maps a setting to a latent vector, `Γ` reconstructs the setting from
//! it, and `Ψ` predicts accuracy from it. Reconstruction runs every epoch on
//! unevaluated settings; every `predictor_interval` epochs the predictor is
//! fitted on the evaluated ones, pulling the latent space toward accuracy.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Optimizer, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{
    BlockSetting, Checkpoint, NamedTensor, StudentSetting, BIT_CHOICES, FILTER_CHOICES, FORMAT_VERSION,
    LAYER_CHOICES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub latent: usize,
    pub lr: f64,
    /// Epochs between predictor phases.
    pub predictor_interval: usize,
    /// Optimizer steps per predictor phase.
    pub predictor_iters: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 32,
            latent: 8,
            lr: 0.001,
            predictor_interval: 50,
            predictor_iters: 20,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.latent == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.predictor_interval == 0 {
            return Err(Error::Config("predictor_interval must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("encoder lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    w: Tensor,
    b: Tensor,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        Dense {
            w: Tensor::new(vec![inputs, outputs], w).expect("shape matches"),
            b: Tensor::zeros(&[outputs]),
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            w: Tensor::zeros(&[inputs, outputs]),
            b: Tensor::zeros(&[outputs]),
        }
    }
}

/// Two dense layers with a tanh between them.
#[derive(Clone, Debug, PartialEq)]
struct Mlp {
    first: Dense,
    second: Dense,
}

impl Mlp {
    fn tensors(&self) -> [&Tensor; 4] {
        [&self.first.w, &self.first.b, &self.second.w, &self.second.b]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.first.w, &mut self.first.b, &mut self.second.w, &mut self.second.b]
    }

    fn register(&self, g: &mut Graph) -> [Var; 4] {
        self.tensors().map(|t| g.param(t.clone()))
    }

    fn apply(g: &mut Graph, vars: &[Var; 4], x: Var) -> Result<Var> {
        let h = g.matmul(x, vars[0])?;
        let h = g.add_bias(h, vars[1])?;
        let h = g.tanh(h);
        let o = g.matmul(h, vars[2])?;
        g.add_bias(o, vars[3])
    }

    fn eval(&self, x: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.constant(x);
        let vars = self.tensors().map(|t| g.constant(t.clone()));
        let out = Mlp::apply(&mut g, &vars, input)?;
        Ok(g.value(out).clone())
    }
}

const PARTS: [&str; 3] = ["phi", "gamma", "psi"];
const NAMES: [&str; 4] = ["hidden.w", "hidden.b", "out.w", "out.b"];

/// Encoder `Φ`, decoder `Γ` and accuracy predictor `Ψ` for one block count.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBundle {
    pub blocks: usize,
    pub config: EncoderConfig,
    phi: Mlp,
    gamma: Mlp,
    psi: Mlp,
}

/// What happened during one call to [`EncoderBundle::train`].
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Reconstruction loss before each epoch's update.
    pub recon_losses: Vec<f64>,
    /// Predictor loss before each predictor phase.
    pub predictor_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

fn legal(position: usize) -> &'static [u32] {
    match position % 3 {
        0 => &LAYER_CHOICES,
        1 => &FILTER_CHOICES,
        _ => &BIT_CHOICES,
    }
}

/// Each raw value min-max scaled to `[0, 1]` over its legal set.
pub fn normalize(setting: &StudentSetting) -> Vec<f64> {
    setting
        .raw_values()
        .iter()
        .enumerate()
        .map(|(p, v)| {
            let set = legal(p);
            let (lo, hi) = (set[0] as f64, set[set.len() - 1] as f64);
            (v - lo) / (hi - lo)
        })
        .collect()
}

/// Maps a reconstructed normalized vector to the nearest legal setting, per position.
pub fn snap(values: &[f64]) -> Result<StudentSetting> {
    if values.is_empty() || !values.len().is_multiple_of(3) {
        return Err(Error::Config(format!("cannot snap {} values into blocks", values.len())));
    }
    let pick = |p: usize, v: f64| -> u32 {
        let set = legal(p);
        let (lo, hi) = (set[0] as f64, set[set.len() - 1] as f64);
        let raw = lo + v * (hi - lo);
        *set
            .iter()
            .min_by(|a, b| (**a as f64 - raw).abs().total_cmp(&(**b as f64 - raw).abs()))
            .expect("non-empty")
    };
    let blocks = values
        .chunks(3)
        .enumerate()
        .map(|(j, c)| BlockSetting::new(pick(3 * j, c[0]), pick(3 * j + 1, c[1]), pick(3 * j + 2, c[2])))
        .collect();
    StudentSetting::new(blocks)
}

fn batch(settings: &[&StudentSetting], blocks: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(settings.len() * 3 * blocks);
    for s in settings {
        if s.block_count() != blocks {
            return Err(Error::Config(format!(
                "encoder expects {blocks} blocks, got {}",
                s.block_count()
            )));
        }
        data.extend(normalize(s));
    }
    Tensor::new(vec![settings.len(), 3 * blocks], data)
}

impl EncoderBundle {
    /// Fresh networks. The predictor's output layer starts at zero.
    pub fn new(blocks: usize, config: EncoderConfig, seed: u64) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Config("block count must be at least 1".into()));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, z) = (3 * blocks, config.hidden, config.latent);
        let phi = Mlp {
            first: Dense::init(&mut rng, d, h),
            second: Dense::init(&mut rng, h, z),
        };
        let gamma = Mlp {
            first: Dense::init(&mut rng, z, h),
            second: Dense::init(&mut rng, h, d),
        };
        let psi = Mlp {
            first: Dense::init(&mut rng, z, h),
            second: Dense::zeros(h, 1),
        };
        Ok(EncoderBundle {
            blocks,
            config,
            phi,
            gamma,
            psi,
        })
    }

    /// Runs `epochs` epochs of two-phase training, continuing from the current weights.
    ///
    /// Reconstruction uses `unevaluated`; the predictor uses `evaluated`
    /// (setting, accuracy) pairs. Each call starts fresh optimizer state, so a
    /// bundle restored from a checkpoint trains exactly like the original.
    pub fn train(
        &mut self,
        unevaluated: &[StudentSetting],
        evaluated: &[(StudentSetting, f64)],
        epochs: usize,
    ) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        if unevaluated.is_empty() {
            return Err(Error::Config("encoder needs at least one unevaluated setting".into()));
        }
        let recon_refs: Vec<&StudentSetting> = unevaluated.iter().collect();
        let recon_x = batch(&recon_refs, self.blocks)?;
        let eval_refs: Vec<&StudentSetting> = evaluated.iter().map(|(s, _)| s).collect();
        let eval = if evaluated.is_empty() {
            if epochs >= self.config.predictor_interval {
                report
                    .warnings
                    .push("no evaluated settings: predictor phase skipped, training a plain autoencoder".into());
            }
            None
        } else {
            let y = evaluated.iter().map(|(_, a)| *a).collect();
            Some((batch(&eval_refs, self.blocks)?, Tensor::new(vec![evaluated.len(), 1], y)?))
        };

        let mut recon_opt = Optimizer::adam(self.config.lr);
        let mut pred_opt = Optimizer::adam(self.config.lr);
        for e in 1..=epochs {
            let loss = self.recon_step(&recon_x, &mut recon_opt)?;
            report.recon_losses.push(loss);
            let Some((eval_x, eval_y)) = eval.as_ref() else {
                continue;
            };
            if e % self.config.predictor_interval == 0 {
                for i in 0..self.config.predictor_iters {
                    let loss = self.predictor_step(eval_x, eval_y, &mut pred_opt)?;
                    if i == 0 {
                        report.predictor_losses.push(loss);
                    }
                }
            }
        }
        Ok(report)
    }

    fn recon_step(&mut self, x: &Tensor, opt: &mut Optimizer) -> Result<f64> {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let pv = self.phi.register(&mut g);
        let gv = self.gamma.register(&mut g);
        let z = Mlp::apply(&mut g, &pv, input)?;
        let out = Mlp::apply(&mut g, &gv, z)?;
        let loss = g.mse(out, x.clone())?;
        self.apply_step(&mut g, loss, &pv, &gv, opt, false)
    }

    fn predictor_step(&mut self, x: &Tensor, y: &Tensor, opt: &mut Optimizer) -> Result<f64> {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let pv = self.phi.register(&mut g);
        let sv = self.psi.register(&mut g);
        let z = Mlp::apply(&mut g, &pv, input)?;
        let out = Mlp::apply(&mut g, &sv, z)?;
        let loss = g.mse(out, y.clone())?;
        self.apply_step(&mut g, loss, &pv, &sv, opt, true)
    }

    /// Updates `Φ` together with `Γ` (or `Ψ` when `predictor`).
    fn apply_step(
        &mut self,
        g: &mut Graph,
        loss: Var,
        phi_vars: &[Var; 4],
        head_vars: &[Var; 4],
        opt: &mut Optimizer,
        predictor: bool,
    ) -> Result<f64> {
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("encoder loss is {value}")));
        }
        g.backward(loss)?;
        let grads: Vec<&Tensor> = phi_vars
            .iter()
            .chain(head_vars)
            .map(|v| g.grad(*v))
            .collect::<Result<_>>()?;
        let head = if predictor { &mut self.psi } else { &mut self.gamma };
        let mut params: Vec<&mut Tensor> = self.phi.tensors_mut().into_iter().chain(head.tensors_mut()).collect();
        opt.step(&mut params, &grads)?;
        Ok(value)
    }

    /// Latent vector `Φ(x)`.
    pub fn encode(&self, setting: &StudentSetting) -> Result<Vec<f64>> {
        Ok(self.encode_many(std::slice::from_ref(setting))?.remove(0))
    }

    pub fn encode_many(&self, settings: &[StudentSetting]) -> Result<Vec<Vec<f64>>> {
        if settings.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&StudentSetting> = settings.iter().collect();
        let z = self.phi.eval(batch(&refs, self.blocks)?)?;
        Ok(z.data().chunks(self.config.latent).map(<[f64]>::to_vec).collect())
    }

    /// `Γ(Φ(x))` in normalized coordinates.
    pub fn reconstruct(&self, setting: &StudentSetting) -> Result<Vec<f64>> {
        let z = self.phi.eval(batch(&[setting], self.blocks)?)?;
        let z = z.reshape(vec![1, self.config.latent])?;
        Ok(self.gamma.eval(z)?.into_data())
    }

    /// `Ψ(Φ(x))`, clamped to `[0, 1]`.
    pub fn predict_accuracy(&self, setting: &StudentSetting) -> Result<f64> {
        let z = self.phi.eval(batch(&[setting], self.blocks)?)?;
        let z = z.reshape(vec![1, self.config.latent])?;
        Ok(self.psi.eval(z)?.item().clamp(0.0, 1.0))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        for (part, mlp) in PARTS.iter().zip([&self.phi, &self.gamma, &self.psi]) {
            for (name, t) in NAMES.iter().zip(mlp.tensors()) {
                tensors.push(NamedTensor::new(format!("{part}.{name}"), t));
            }
        }
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "encoder".into());
        meta.insert("blocks".into(), self.blocks.into());
        meta.insert("encoder_config".into(), serde_json::to_value(&self.config)?);
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            setting: None,
            seed: 0,
            tensors,
            meta,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|v| v.as_str()) != Some("encoder") {
            return Err(Error::Data("checkpoint does not hold an encoder".into()));
        }
        let config: EncoderConfig = serde_json::from_value(
            ck.meta
                .get("encoder_config")
                .cloned()
                .ok_or_else(|| Error::Data("encoder checkpoint lacks its config".into()))?,
        )?;
        let mut bundle = EncoderBundle::new(ck.meta_usize("blocks")?, config, 0)?;
        let mlps = [&mut bundle.phi, &mut bundle.gamma, &mut bundle.psi];
        for (part, mlp) in PARTS.iter().zip(mlps) {
            for (name, t) in NAMES.iter().zip(mlp.tensors_mut()) {
                let stored = ck.tensor(&format!("{part}.{name}"))?;
                if stored.shape() != t.shape() {
                    return Err(Error::Data(format!(
                        "{part}.{name} has shape {:?}, expected {:?}",
                        stored.shape(),
                        t.shape()
                    )));
                }
                *t = stored;
            }
        }
        Ok(bundle)
    }
}

/// Fresh bundle trained for `epochs` epochs.
pub fn train_two_phase(
    unevaluated: &[StudentSetting],
    evaluated: &[(StudentSetting, f64)],
    epochs: usize,
    config: EncoderConfig,
    seed: u64,
) -> Result<(EncoderBundle, TrainReport)> {
    let blocks = unevaluated
        .first()
        .map(StudentSetting::block_count)
        .ok_or_else(|| Error::Config("encoder needs at least one unevaluated setting".into()))?;
    let mut bundle = EncoderBundle::new(blocks, config, seed)?;
    let report = bundle.train(unevaluated, evaluated, epochs)?;
    Ok((bundle, report))
}
