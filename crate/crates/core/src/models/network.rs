use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::quant::{calibrate_quantspec, quantize};
use super::setting::StudentSetting;
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::LabeledSeries;
use crate::error::{shape_err, Error, Result};

/// Filters per convolutional layer unless configured otherwise.
pub const DEFAULT_FILTERS: usize = 8;

/// Series per forward pass when predicting.
const PREDICT_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[K, c_in, len]`
    pub filters: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

/// Parallel-convolution classifier parameterized by a [`StudentSetting`].
///
/// Each block runs `L_j` convolutions side by side on the block input, with
/// filter lengths halving from `F_j`, applies ReLU and concatenates the
/// outputs along channels. The last block is globally average-pooled over
/// time and fed to a full-precision dense softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentNetwork {
    pub setting: StudentSetting,
    pub class_count: usize,
    pub input_dims: usize,
    pub filters_per_layer: usize,
    pub seed: u64,
    pub blocks: Vec<Vec<ConvLayer>>,
    /// `[channels_out(B), classes]`
    pub head_weights: Tensor,
    /// `[classes]`
    pub head_bias: Tensor,
}

/// Handles returned by [`StudentNetwork::forward`].
pub struct ForwardVars {
    pub logits: Var,
    pub probs: Var,
    /// Parameter leaves, in [`StudentNetwork::parameters`] order.
    pub params: Vec<Var>,
}

fn check_shape(
    setting: &StudentSetting,
    class_count: usize,
    input_dims: usize,
    filters: usize,
) -> Result<()> {
    setting.validate()?;
    if class_count < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {class_count}")));
    }
    if input_dims == 0 || filters == 0 {
        return Err(Error::Config("input dims and filter count must be positive".into()));
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("shape matches")
}

/// Input channels of block `j`.
fn block_inputs(setting: &StudentSetting, j: usize, input_dims: usize, filters: usize) -> usize {
    if j == 0 {
        input_dims
    } else {
        filters * setting.blocks[j - 1].layers as usize
    }
}

impl StudentNetwork {
    /// Initializes every tensor uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn build(
        setting: &StudentSetting,
        class_count: usize,
        input_dims: usize,
        filters_per_layer: usize,
        seed: u64,
    ) -> Result<Self> {
        check_shape(setting, class_count, input_dims, filters_per_layer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = filters_per_layer;
        let mut blocks = Vec::with_capacity(setting.block_count());
        for (j, block) in setting.blocks.iter().enumerate() {
            let c_in = block_inputs(setting, j, input_dims, k);
            let layers = block
                .layer_lengths()
                .into_iter()
                .map(|len| {
                    let bound = 1.0 / ((c_in * len) as f64).sqrt();
                    ConvLayer {
                        filters: uniform(&mut rng, &[k, c_in, len], bound),
                        bias: uniform(&mut rng, &[k], bound),
                    }
                })
                .collect();
            blocks.push(layers);
        }
        let c_out = k * setting.blocks.last().expect("validated").layers as usize;
        let bound = 1.0 / (c_out as f64).sqrt();
        Ok(StudentNetwork {
            setting: setting.clone(),
            class_count,
            input_dims,
            filters_per_layer: k,
            seed,
            blocks,
            head_weights: uniform(&mut rng, &[c_out, class_count], bound),
            head_bias: uniform(&mut rng, &[class_count], bound),
        })
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in self.blocks.iter().flatten() {
            out.push(&layer.filters);
            out.push(&layer.bias);
        }
        out.push(&self.head_weights);
        out.push(&self.head_bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self.blocks.iter_mut().flatten() {
            out.push(&mut layer.filters);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        out
    }

    /// Names matching [`parameters`](Self::parameters) order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (j, block) in self.blocks.iter().enumerate() {
            for l in 0..block.len() {
                out.push(format!("block{j}.layer{l}.filters"));
                out.push(format!("block{j}.layer{l}.bias"));
            }
        }
        out.push("head.weights".into());
        out.push("head.bias".into());
        out
    }

    /// All parameter values concatenated.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.parameters().into_iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn size_bits(&self) -> u64 {
        model_size_bits(&self.setting, self.class_count, self.input_dims, self.filters_per_layer)
    }

    /// Records a forward pass of `input` (`[batch, M, time]`) on `g`.
    ///
    /// Convolution weights and biases of blocks below 32 bits are replaced by
    /// their quantized values (per-tensor symmetric calibration), with
    /// straight-through gradients.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<ForwardVars> {
        let s = g.value(input).shape();
        if s.len() != 3 || s[1] != self.input_dims {
            return shape_err(
                "forward_classify",
                format!("expected [batch, {}, time], got {s:?}", self.input_dims),
            );
        }
        let mut params = Vec::new();
        let mut x = input;
        for (block, conf) in self.blocks.iter().zip(&self.setting.blocks) {
            let mut outs = Vec::with_capacity(block.len());
            for layer in block {
                let w = g.param(layer.filters.clone());
                let b = g.param(layer.bias.clone());
                params.push(w);
                params.push(b);
                let wq = quantized_leaf(g, w, conf.bits)?;
                let bq = quantized_leaf(g, b, conf.bits)?;
                let y = g.conv1d(x, wq, Some(bq))?;
                outs.push(g.relu(y));
            }
            x = if outs.len() == 1 {
                outs[0]
            } else {
                g.concat_channels(&outs)?
            };
        }
        let pooled = g.mean_time(x)?;
        let hw = g.param(self.head_weights.clone());
        let hb = g.param(self.head_bias.clone());
        params.push(hw);
        params.push(hb);
        let z = g.matmul(pooled, hw)?;
        let logits = g.add_bias(z, hb)?;
        let probs = g.softmax(logits);
        Ok(ForwardVars {
            logits,
            probs,
            params,
        })
    }

    /// Class distributions for each series.
    pub fn predict_proba(&self, series: &[LabeledSeries]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(series.len());
        for chunk in series.chunks(PREDICT_BATCH) {
            let refs: Vec<&LabeledSeries> = chunk.iter().collect();
            let mut g = Graph::new();
            let x = g.constant(batch_tensor(&refs)?);
            let f = self.forward(&mut g, x)?;
            out.extend(g.value(f.probs).data().chunks(self.class_count).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Fraction of series whose most probable class matches the label.
    pub fn accuracy(&self, series: &[LabeledSeries]) -> Result<f64> {
        if series.is_empty() {
            return Ok(0.0);
        }
        let probs = self.predict_proba(series)?;
        let correct = probs
            .iter()
            .zip(series)
            .filter(|(p, s)| argmax(p) == s.label)
            .count();
        Ok(correct as f64 / series.len() as f64)
    }
}

fn quantized_leaf(g: &mut Graph, w: Var, bits: u32) -> Result<Var> {
    let spec = calibrate_quantspec(g.value(w), bits)?;
    if spec.is_pass_through() {
        return Ok(w);
    }
    let q = quantize(g.value(w).data(), &spec);
    let fwd = Tensor::new(g.value(w).shape().to_vec(), q.values)?;
    g.straight_through(w, fwd, q.in_range)
}

/// Builds the student for `setting` with the crate's default initialization.
pub fn build_student(
    setting: &StudentSetting,
    class_count: usize,
    input_dims: usize,
    filters_per_layer: usize,
    seed: u64,
) -> Result<StudentNetwork> {
    StudentNetwork::build(setting, class_count, input_dims, filters_per_layer, seed)
}

/// Class distribution of a single series.
pub fn forward_classify(network: &StudentNetwork, series: &LabeledSeries) -> Result<Vec<f64>> {
    Ok(network
        .predict_proba(std::slice::from_ref(series))?
        .pop()
        .expect("one row"))
}

/// Stacks equal-length series into `[batch, M, time]`.
pub fn batch_tensor(series: &[&LabeledSeries]) -> Result<Tensor> {
    let first = series
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let (dims, len) = (first.dims(), first.len());
    let mut data = Vec::with_capacity(series.len() * dims * len);
    for s in series {
        if s.dims() != dims || s.values.iter().any(|d| d.len() != len) {
            return shape_err(
                "batch",
                format!("series of shape {}x{} in a {dims}x{len} batch", s.dims(), s.len()),
            );
        }
        for d in &s.values {
            data.extend_from_slice(d);
        }
    }
    Tensor::new(vec![series.len(), dims, len], data)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Exact storage of a student in bits.
///
/// Every convolution layer of block `j` stores `K * c_in(j) * len` filter
/// weights and `K` biases at `W_j` bits. The head stores
/// `classes * channels_out(B) + classes` values at 32 bits.
pub fn model_size_bits(
    setting: &StudentSetting,
    class_count: usize,
    input_dims: usize,
    filters_per_layer: usize,
) -> u64 {
    let k = filters_per_layer as u64;
    let mut bits = 0u64;
    for (j, block) in setting.blocks.iter().enumerate() {
        let c_in = block_inputs(setting, j, input_dims, filters_per_layer) as u64;
        let w = block.bits as u64;
        for len in block.layer_lengths() {
            bits += k * c_in * len as u64 * w + k * w;
        }
    }
    let c_out = k * setting.blocks.last().map_or(0, |b| b.layers as u64);
    let classes = class_count as u64;
    bits + (classes * c_out + classes) * 32
}
