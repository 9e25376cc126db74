//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value, so nodes are
//! topologically ordered by construction and `backward` is a single reverse
//! sweep over the tape.

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Relu(Var),
    Tanh(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv1d {
        input: Var,
        filters: Var,
        bias: Option<Var>,
        pad_left: usize,
    },
    ConcatChannels(Vec<Var>),
    MeanTime(Var),
    StraightThrough {
        input: Var,
        pass: Vec<bool>,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    KlDiv {
        target: Tensor,
        probs: Var,
    },
    Mse {
        input: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

/// A single forward/backward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.grads = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.grads = None;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
            .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let k = *t.shape().last().expect("tensor has at least one dim");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `[m]` bias to every row of a `[n, m]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let m = *ta.shape().last().unwrap_or(&0);
        if tb.shape() != [m] {
            return shape_err("add_bias", format!("{:?} + {:?}", ta.shape(), tb.shape()));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(m) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    /// 1D cross-correlation with zero "same" padding.
    ///
    /// `input` is `[batch, c_in, time]` (or `[c_in, time]`), `filters` is
    /// `[c_out, c_in, len]` and `bias` is `[c_out]`. The output keeps the
    /// input's time length; even filter lengths put the extra zero on the right.
    pub fn conv1d(&mut self, input: Var, filters: Var, bias: Option<Var>) -> Result<Var> {
        let (ti, tf) = (self.value(input), self.value(filters));
        let (batch, c_in, time) = match *ti.shape() {
            [c, t] => (1, c, t),
            [b, c, t] => (b, c, t),
            ref s => return shape_err("conv1d", format!("input must be 2D or 3D, got {s:?}")),
        };
        let (c_out, f_in, len) = match *tf.shape() {
            [o, i, l] => (o, i, l),
            ref s => return shape_err("conv1d", format!("filters must be 3D, got {s:?}")),
        };
        if f_in != c_in {
            return shape_err(
                "conv1d",
                format!("input has {c_in} channels but filters expect {f_in}"),
            );
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return shape_err(
                    "conv1d",
                    format!("bias {:?} for {c_out} output channels", self.value(b).shape()),
                );
            }
        }
        let pad_left = (len - 1) / 2;
        let x = ti.data();
        let w = tf.data();
        let mut out = vec![0.0; batch * c_out * time];
        for b in 0..batch {
            for co in 0..c_out {
                let y = &mut out[(b * c_out + co) * time..(b * c_out + co + 1) * time];
                if let Some(bv) = bias {
                    let bias_v = self.nodes[bv.0].value.data()[co];
                    y.iter_mut().for_each(|v| *v = bias_v);
                }
                for ci in 0..c_in {
                    let xr = &x[(b * c_in + ci) * time..(b * c_in + ci + 1) * time];
                    let wr = &w[(co * c_in + ci) * len..(co * c_in + ci + 1) * len];
                    for (k, &wk) in wr.iter().enumerate() {
                        let (t0, t1, off) = tap_range(k, pad_left, time);
                        for t in t0..t1 {
                            y[t] += wk * xr[t + k - off];
                        }
                    }
                }
            }
        }
        let shape = if ti.shape().len() == 2 {
            vec![c_out, time]
        } else {
            vec![batch, c_out, time]
        };
        let out = Tensor::new(shape, out)?;
        let mut parents = vec![input, filters];
        parents.extend(bias);
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                filters,
                bias,
                pad_left,
            },
            &parents,
        ))
    }

    /// Concatenates `[batch, c_i, time]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(v) => self.value(*v).shape().to_vec(),
            None => return shape_err("concat_channels", "no inputs"),
        };
        if first.len() != 3 {
            return shape_err("concat_channels", format!("expected 3D, got {first:?}"));
        }
        let (batch, time) = (first[0], first[2]);
        let mut channels = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != 3 || s[0] != batch || s[2] != time {
                return shape_err("concat_channels", format!("{first:?} vs {s:?}"));
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(batch * channels * time);
        for b in 0..batch {
            for p in parts {
                let t = self.value(*p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * time..(b + 1) * c * time]);
            }
        }
        let out = Tensor::new(vec![batch, channels, time], out)?;
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), parts))
    }

    /// Global average pooling: `[batch, channels, time] -> [batch, channels]`.
    pub fn mean_time(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (batch, channels, time) = match *t.shape() {
            [b, c, t] => (b, c, t),
            ref s => return shape_err("mean_time", format!("expected 3D, got {s:?}")),
        };
        let out: Vec<f64> = t
            .data()
            .chunks(time)
            .map(|row| row.iter().sum::<f64>() / time as f64)
            .collect();
        let out = Tensor::new(vec![batch, channels], out)?;
        Ok(self.push(out, Op::MeanTime(a), &[a]))
    }

    /// Replaces `input` with `forward` in the forward pass while passing the
    /// upstream gradient through unchanged wherever `pass` is true (zero elsewhere).
    pub fn straight_through(&mut self, input: Var, forward: Tensor, pass: Vec<bool>) -> Result<Var> {
        let s = self.value(input).shape();
        if forward.shape() != s || pass.len() != forward.len() {
            return shape_err(
                "straight_through",
                format!("input {s:?}, forward {:?}, mask {}", forward.shape(), pass.len()),
            );
        }
        Ok(self.push(forward, Op::StraightThrough { input, pass }, &[input]))
    }

    /// Mean negative log-likelihood of `labels` under row distributions `probs`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(probs);
        let (n, k) = match *t.shape() {
            [n, k] => (n, k),
            ref s => return shape_err("cross_entropy", format!("expected 2D, got {s:?}")),
        };
        if labels.len() != n {
            return shape_err("cross_entropy", format!("{n} rows, {} labels", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return shape_err("cross_entropy", format!("label {bad} >= class count {k}"));
        }
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -t.data()[i * k + l].max(LOG_FLOOR).ln())
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        ))
    }

    /// Mean over rows of `KL(target_row || probs_row)`; `target` is constant.
    pub fn kl_div(&mut self, target: Tensor, probs: Var) -> Result<Var> {
        let t = self.value(probs);
        if t.shape().len() != 2 || target.shape() != t.shape() {
            return shape_err("kl_div", format!("{:?} vs {:?}", target.shape(), t.shape()));
        }
        let n = t.shape()[0];
        let loss = kl_sum(target.data(), t.data()) / n as f64;
        Ok(self.push(Tensor::scalar(loss), Op::KlDiv { target, probs }, &[probs]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, input: Var, target: Tensor) -> Result<Var> {
        let t = self.value(input);
        if t.shape() != target.shape() {
            return shape_err("mse", format!("{:?} vs {:?}", t.shape(), target.shape()));
        }
        let loss = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / t.len() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { input, target }, &[input]))
    }

    /// Computes `d loss / d node` for every node that depends on a parameter.
    ///
    /// Recomputes from scratch on every call, so repeated calls give the
    /// same result.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called before any forward pass".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("loss node {} not on this graph", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Result<&Tensor> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Usage("gradient requested before backward".into()))?;
        grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .ok_or_else(|| Error::Usage(format!("node {} has no gradient", v.0)))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), data).expect("grad shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        acc(grads, v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, like(*b, g.data().iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    acc(grads, *a, like(*a, g.data().iter().zip(vb).map(|(g, y)| g * y).collect()));
                }
                if self.needs(*b) {
                    acc(grads, *b, like(*b, g.data().iter().zip(va).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(a, c) => acc(grads, *a, like(*a, g.data().iter().map(|x| x * c).collect())),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, like(*a, vec![g.item(); n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, like(*a, vec![g.item() / n as f64; n]));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let k = *node.value.shape().last().expect("nonempty shape");
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(g.data().chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..k {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, like(*a, dx));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let dx = g.data().iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 });
                acc(grads, *a, like(*a, dx.collect()));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let dx = g.data().iter().zip(y).map(|(g, y)| g * (1.0 - y * y));
                acc(grads, *a, like(*a, dx.collect()));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // dA = G B^T
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        let gr = &g.data()[r * m..(r + 1) * m];
                        for c in 0..k {
                            let br = &tb.data()[c * m..(c + 1) * m];
                            da[r * k + c] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(grads, *a, like(*a, da));
                }
                if self.needs(*b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * m];
                    for r in 0..n {
                        let gr = &g.data()[r * m..(r + 1) * m];
                        for c in 0..k {
                            let av = ta.data()[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[c * m..(c + 1) * m].iter_mut().zip(gr) {
                                *d += av * gv;
                            }
                        }
                    }
                    acc(grads, *b, like(*b, db));
                }
            }
            Op::AddBias(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let m = self.value(*b).len();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(grads, *b, like(*b, db));
                }
            }
            Op::Conv1d {
                input,
                filters,
                bias,
                pad_left,
            } => self.conv1d_backward(g, *input, *filters, *bias, *pad_left, grads),
            Op::ConcatChannels(parts) => {
                let s = node.value.shape();
                let (batch, channels, time) = (s[0], s[1], s[2]);
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).shape()[1];
                    if self.needs(*p) {
                        let mut dp = Vec::with_capacity(batch * c * time);
                        for b in 0..batch {
                            let start = (b * channels + offset) * time;
                            dp.extend_from_slice(&g.data()[start..start + c * time]);
                        }
                        acc(grads, *p, like(*p, dp));
                    }
                    offset += c;
                }
            }
            Op::MeanTime(a) => {
                let time = self.value(*a).shape()[2];
                let mut dx = Vec::with_capacity(self.value(*a).len());
                for gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / time as f64, time));
                }
                acc(grads, *a, like(*a, dx));
            }
            Op::StraightThrough { input, pass } => {
                let dx = g.data().iter().zip(pass).map(|(g, p)| if *p { *g } else { 0.0 });
                acc(grads, *input, like(*input, dx.collect()));
            }
            Op::CrossEntropy { probs, labels } => {
                let t = self.value(*probs);
                let k = t.shape()[1];
                let n = labels.len() as f64;
                let mut dp = vec![0.0; t.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let p = t.data()[i * k + l];
                    if p > LOG_FLOOR {
                        dp[i * k + l] = -g.item() / (n * p);
                    }
                }
                acc(grads, *probs, like(*probs, dp));
            }
            Op::KlDiv { target, probs } => {
                let t = self.value(*probs);
                let n = t.shape()[0] as f64;
                let dp = target
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(q, p)| if *p > LOG_FLOOR { -g.item() * q / (n * p) } else { 0.0 })
                    .collect();
                acc(grads, *probs, like(*probs, dp));
            }
            Op::Mse { input, target } => {
                let t = self.value(*input);
                let c = 2.0 * g.item() / t.len() as f64;
                let dx = t.data().iter().zip(target.data()).map(|(a, b)| c * (a - b)).collect();
                acc(grads, *input, like(*input, dx));
            }
        }
    }

    fn conv1d_backward(
        &self,
        g: &Tensor,
        input: Var,
        filters: Var,
        bias: Option<Var>,
        pad_left: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let (ti, tf) = (self.value(input), self.value(filters));
        let (c_out, c_in, len) = (tf.shape()[0], tf.shape()[1], tf.shape()[2]);
        let time = *ti.shape().last().expect("conv input has time axis");
        let batch = ti.len() / (c_in * time);
        let (x, w, gy) = (ti.data(), tf.data(), g.data());

        let mut dw = self.needs(filters).then(|| vec![0.0; tf.len()]);
        let mut dx = self.needs(input).then(|| vec![0.0; ti.len()]);
        for b in 0..batch {
            for co in 0..c_out {
                let gr = &gy[(b * c_out + co) * time..(b * c_out + co + 1) * time];
                for ci in 0..c_in {
                    let xoff = (b * c_in + ci) * time;
                    let woff = (co * c_in + ci) * len;
                    for k in 0..len {
                        let (t0, t1, off) = tap_range(k, pad_left, time);
                        if t0 >= t1 {
                            continue;
                        }
                        if let Some(dw) = dw.as_mut() {
                            let xr = &x[xoff + t0 + k - off..xoff + t1 + k - off];
                            dw[woff + k] += gr[t0..t1].iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wk = w[woff + k];
                            let dxr = &mut dx[xoff + t0 + k - off..xoff + t1 + k - off];
                            for (d, gv) in dxr.iter_mut().zip(&gr[t0..t1]) {
                                *d += wk * gv;
                            }
                        }
                    }
                }
            }
        }
        let put = |grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>| {
            let delta = Tensor::new(self.value(v).shape().to_vec(), data).expect("grad shape");
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        if let Some(dw) = dw {
            put(grads, filters, dw);
        }
        if let Some(dx) = dx {
            put(grads, input, dx);
        }
        if let Some(bv) = bias.filter(|b| self.needs(*b)) {
            let mut db = vec![0.0; c_out];
            for (row, gr) in gy.chunks(time).enumerate() {
                db[row % c_out] += gr.iter().sum::<f64>();
            }
            put(grads, bv, db);
        }
    }
}

/// Output positions `t0..t1` for which tap `k` reads an in-bounds input sample
/// `t + k - pad_left`. Returns the range and `pad_left` for index arithmetic.
#[inline]
fn tap_range(k: usize, pad_left: usize, time: usize) -> (usize, usize, usize) {
    // need 0 <= t + k - pad_left < time
    let t0 = pad_left.saturating_sub(k);
    let t1 = (time + pad_left).saturating_sub(k).min(time);
    (t0, t1.max(t0), pad_left)
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for c in 0..k {
            let av = a[r * k + c];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[c * m..(c + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

fn kl_sum(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, p)| q * (q.ln() - p.max(LOG_FLOOR).ln()))
        .sum()
}

/// `KL(q || p) = sum q log(q / p)` with `p` floored at [`LOG_FLOOR`].
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    debug_assert_eq!(q.len(), p.len());
    kl_sum(q, p)
}
