//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its value
//! and whatever it needs for the backward pass. Because nodes can only
//! reference earlier nodes, insertion order is a topological order, and
//! [`Graph::backward`] simply walks the tape from the loss back to the start.
//!
//! ```
//! use dist_core::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
//! let half_sq = g.sum_squares(x).unwrap();
//! let loss = g.scale(half_sq, 0.5).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[1.0, -2.0, 3.0]);
//! ```
//!
//! There is no broadcasting: each primitive states the exact shapes it
//! accepts and rejects anything else with [`Error::Dimension`].

mod kernels;

use kernels::ConvGeom;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) use kernels::{log_sum_exp, softmax};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which 2×2 downsampler a network uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    Avg,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    AvgPool2(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Softmax(Var),
    Gram {
        input: Var,
        channels: usize,
        hw: usize,
    },
    Sum(Var),
    SumSquares(Var),
    SquaredError {
        input: Var,
        target: Vec<f64>,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    Scale(Var, f64),
    Add(Var, Var),
    Reshape(Var),
    SpatialMean {
        input: Var,
        hw: usize,
    },
    Select {
        input: Var,
        index: usize,
    },
    ChannelAffine {
        input: Var,
        scale: Vec<f64>,
        hw: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A tape of primitive applications.
///
/// A graph belongs to one thread at a time; independent graphs share
/// nothing and may be driven from many threads at once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Adds a leaf that keeps its own `requires_grad` flag.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.zero_grad();
        self.push(tensor, Op::Leaf)
    }

    /// Adds a constant leaf.
    pub fn input(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Adds a leaf that receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves a node's value (with its gradient) out of the graph.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Clears every gradient so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn derived(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut t = Tensor::from_parts(shape, data);
        t.set_requires_grad(self.needs_grad(inputs));
        Ok(self.push(t, op))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// 2-D cross-correlation of `input [C_in,H,W]` with `weight [C_out,C_in,k,k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        let mismatch = || {
            Error::dim(
                "conv2d",
                format!("input {xs:?} incompatible with weight {ws:?} (stride {stride}, padding {padding})"),
            )
        };
        let ([c_in, h, w], [c_out, wc_in, k, k2]) = (xs, ws) else {
            return Err(mismatch());
        };
        let (c_in, h, w, c_out, wc_in, k, k2) = (*c_in, *h, *w, *c_out, *wc_in, *k, *k2);
        if stride == 0 || k == 0 || k != k2 || c_in != wc_in || k > h + 2 * padding || k > w + 2 * padding {
            return Err(mismatch());
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad: padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (w + 2 * padding - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.data(input), self.data(weight));
        self.derived(
            "conv2d",
            vec![c_out, geom.h_out, geom.w_out],
            out,
            &[input, weight],
            Op::Conv2d { input, weight, geom },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.derived("relu", shape, out, &[x], Op::Relu(x))
    }

    fn pool_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.value(x).chw(op)?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::dim(op, format!("2x2 pooling needs even non-zero extents, got {h}x{w}")));
        }
        Ok((c, h, w))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.pool_dims(x, "avg_pool2")?;
        let out = kernels::avg_pool2_forward(c, h, w, self.data(x));
        self.derived("avg_pool2", vec![c, h / 2, w / 2], out, &[x], Op::AvgPool2(x))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.pool_dims(x, "max_pool2")?;
        let (out, argmax) = kernels::max_pool2_forward(c, h, w, self.data(x));
        self.derived("max_pool2", vec![c, h / 2, w / 2], out, &[x], Op::MaxPool2 { input: x, argmax })
    }

    pub fn pool2(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        match kind {
            PoolKind::Avg => self.avg_pool2(x),
            PoolKind::Max => self.max_pool2(x),
        }
    }

    /// `W x + b` for `x: [D]` (giving `[M]`) or row-wise for `x: [N, D]` (giving `[N, M]`).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let err = || Error::dim("linear", format!("x {xs:?}, W {ws:?}, b {bs:?}"));
        let (rows, d_in) = match xs {
            [d] => (1, *d),
            [n, d] => (*n, *d),
            _ => return Err(err()),
        };
        let &[d_out, wd] = ws else { return Err(err()) };
        if wd != d_in || bs != [d_out] {
            return Err(err());
        }
        let out_shape = if xs.len() == 1 { vec![d_out] } else { vec![rows, d_out] };
        let (x, w, b) = (self.data(input), self.data(weight), self.data(bias));
        let mut out = Vec::with_capacity(rows * d_out);
        for r in 0..rows {
            let xr = &x[r * d_in..(r + 1) * d_in];
            for m in 0..d_out {
                let wr = &w[m * d_in..(m + 1) * d_in];
                out.push(b[m] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>());
            }
        }
        self.derived(
            "linear",
            out_shape,
            out,
            &[input, weight, bias],
            Op::Linear { input, weight, bias, rows, d_in, d_out },
        )
    }

    /// `−log softmax(logits)[label]` as a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let shape = self.shape(logits);
        let &[k] = shape else {
            return Err(Error::dim("softmax_cross_entropy", format!("expected [K] logits, got {shape:?}")));
        };
        if label >= k {
            return Err(Error::Index { what: "class labels", index: label, len: k });
        }
        let z = self.data(logits);
        let loss = log_sum_exp(z) - z[label];
        let probs = softmax(z);
        self.derived("softmax_cross_entropy", vec![], vec![loss], &[logits], Op::SoftmaxCrossEntropy { logits, label, probs })
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 1 {
            return Err(Error::dim("softmax", format!("expected [K], got {shape:?}")));
        }
        let p = softmax(self.data(logits));
        self.derived("softmax", shape, p, &[logits], Op::Softmax(logits))
    }

    /// Channel Gram matrix of `[C,H,W]` activations, normalized by `H·W`.
    pub fn gram(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw("gram")?;
        if c == 0 || h * w == 0 {
            return Err(Error::dim("gram", format!("empty activation {:?}", self.shape(a))));
        }
        let g = kernels::gram_forward(c, h * w, self.data(a));
        self.derived("gram", vec![c, c], g, &[a], Op::Gram { input: a, channels: c, hw: h * w })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.derived("sum", vec![], vec![s], &[x], Op::Sum(x))
    }

    /// `Σ x²`.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().map(|v| v * v).sum();
        self.derived("sum_squares", vec![], vec![s], &[x], Op::SumSquares(x))
    }

    /// `Σ (x − target)²` against a constant of identical shape.
    pub fn squared_error(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::dim(
                "squared_error",
                format!("{:?} vs target {:?}", self.shape(x), target.shape()),
            ));
        }
        let s = self
            .data(x)
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let op = Op::SquaredError { input: x, target: target.data().to_vec() };
        self.derived("squared_error", vec![], vec![s], &[x], op)
    }

    /// `Σ wᵢ xᵢ` against constant weights of identical shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(Error::dim(
                "weighted_sum",
                format!("{:?} vs weights {:?}", self.shape(x), weights.shape()),
            ));
        }
        let s = self.data(x).iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let op = Op::WeightedSum { input: x, weights: weights.data().to_vec() };
        self.derived("weighted_sum", vec![], vec![s], &[x], op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.derived("scale", shape, out, &[x], Op::Scale(x, c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.derived("add", shape, out, &[a, b], Op::Add(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.data(x).to_vec();
        self.derived("reshape", shape.to_vec(), data, &[x], Op::Reshape(x))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, &[n])
    }

    /// Mean over the spatial extents: `[C,H,W] -> [C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw("spatial_mean")?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::dim("spatial_mean", "empty spatial extent"));
        }
        let d = self.data(x);
        let out = (0..c).map(|ch| d[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        self.derived("spatial_mean", vec![c], out, &[x], Op::SpatialMean { input: x, hw })
    }

    /// One element of a tensor, by flat index, as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if index >= n {
            return Err(Error::Index { what: "tensor elements", index, len: n });
        }
        let v = self.data(x)[index];
        self.derived("select", vec![], vec![v], &[x], Op::Select { input: x, index })
    }

    /// `x[c] * scale[c] + shift[c]` per channel of a `[C,H,W]` tensor.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let (c, h, w) = self.value(x).chw("channel_affine")?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::dim(
                "channel_affine",
                format!("{c} channels, {} scales, {} shifts", scale.len(), shift.len()),
            ));
        }
        let hw = h * w;
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * scale[i / hw] + shift[i / hw])
            .collect();
        let shape = self.shape(x).to_vec();
        let op = Op::ChannelAffine { input: x, scale: scale.to_vec(), hw };
        self.derived("channel_affine", shape, out, &[x], op)
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    ///
    /// Gradients from several consumers of one node are summed. Running
    /// backward twice without [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph; reset gradients first".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        if !lv.requires_grad() {
            return Err(Error::Contract("loss does not depend on any parameter".into()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.propagate(idx, &gout, &mut grads);
            self.nodes[idx].value.set_grad(gout)?;
        }
        for n in &self.nodes {
            if let Some(g) = n.value.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        // Runs `f` on the gradient accumulator of `v`, skipping inputs that need no gradient.
        let wants = |v: Var| self.nodes[v.0].value.requires_grad();
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if !wants(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; numel(v)]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geom } => {
                let (xd, wd) = (self.data(*input), self.data(*weight));
                acc(*input, grads, &mut |g| kernels::conv2d_backward_input(geom, wd, gout, g));
                acc(*weight, grads, &mut |g| kernels::conv2d_backward_weight(geom, xd, gout, g));
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, grads, &mut |g| {
                    for ((gi, &xi), &go) in g.iter_mut().zip(xd).zip(gout) {
                        if xi > 0.0 {
                            *gi += go;
                        }
                    }
                });
            }
            Op::AvgPool2(x) => {
                let [c, h, w] = self.shape(*x) else { unreachable!() };
                let (c, h, w) = (*c, *h, *w);
                acc(*x, grads, &mut |g| kernels::avg_pool2_backward(c, h, w, gout, g));
            }
            Op::MaxPool2 { input, argmax } => {
                acc(*input, grads, &mut |g| {
                    for (&src, &go) in argmax.iter().zip(gout) {
                        g[src] += go;
                    }
                });
            }
            Op::Linear { input, weight, bias, rows, d_in, d_out } => {
                let (rows, d_in, d_out) = (*rows, *d_in, *d_out);
                let (xd, wd) = (self.data(*input), self.data(*weight));
                acc(*input, grads, &mut |g| {
                    for r in 0..rows {
                        let gr = &mut g[r * d_in..(r + 1) * d_in];
                        for m in 0..d_out {
                            let go = gout[r * d_out + m];
                            for (gi, &wv) in gr.iter_mut().zip(&wd[m * d_in..(m + 1) * d_in]) {
                                *gi += go * wv;
                            }
                        }
                    }
                });
                acc(*weight, grads, &mut |g| {
                    for r in 0..rows {
                        let xr = &xd[r * d_in..(r + 1) * d_in];
                        for m in 0..d_out {
                            let go = gout[r * d_out + m];
                            for (gi, &xv) in g[m * d_in..(m + 1) * d_in].iter_mut().zip(xr) {
                                *gi += go * xv;
                            }
                        }
                    }
                });
                acc(*bias, grads, &mut |g| {
                    for r in 0..rows {
                        for m in 0..d_out {
                            g[m] += gout[r * d_out + m];
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, label, probs } => {
                let go = gout[0];
                acc(*logits, grads, &mut |g| {
                    for (k, (gi, &p)) in g.iter_mut().zip(probs).enumerate() {
                        let y = if k == *label { 1.0 } else { 0.0 };
                        *gi += go * (p - y);
                    }
                });
            }
            Op::Softmax(x) => {
                let p = node.value.data();
                let dot: f64 = p.iter().zip(gout).map(|(a, b)| a * b).sum();
                acc(*x, grads, &mut |g| {
                    for ((gi, &pi), &go) in g.iter_mut().zip(p).zip(gout) {
                        *gi += pi * (go - dot);
                    }
                });
            }
            Op::Gram { input, channels, hw } => {
                let a = self.data(*input);
                acc(*input, grads, &mut |g| kernels::gram_backward(*channels, *hw, a, gout, g));
            }
            Op::Sum(x) => {
                let go = gout[0];
                acc(*x, grads, &mut |g| g.iter_mut().for_each(|gi| *gi += go));
            }
            Op::SumSquares(x) => {
                let (go, xd) = (gout[0], self.data(*x));
                acc(*x, grads, &mut |g| {
                    for (gi, &xi) in g.iter_mut().zip(xd) {
                        *gi += 2.0 * go * xi;
                    }
                });
            }
            Op::SquaredError { input, target } => {
                let (go, xd) = (gout[0], self.data(*input));
                acc(*input, grads, &mut |g| {
                    for ((gi, &xi), &ti) in g.iter_mut().zip(xd).zip(target) {
                        *gi += 2.0 * go * (xi - ti);
                    }
                });
            }
            Op::WeightedSum { input, weights } => {
                let go = gout[0];
                acc(*input, grads, &mut |g| {
                    for (gi, &wi) in g.iter_mut().zip(weights) {
                        *gi += go * wi;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, grads, &mut |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += c * go;
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, grads, &mut |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                acc(*x, grads, &mut |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::SpatialMean { input, hw } => {
                let hw = *hw;
                acc(*input, grads, &mut |g| {
                    for (ch, &go) in gout.iter().enumerate() {
                        let share = go / hw as f64;
                        g[ch * hw..(ch + 1) * hw].iter_mut().for_each(|gi| *gi += share);
                    }
                });
            }
            Op::Select { input, index } => {
                acc(*input, grads, &mut |g| g[*index] += gout[0]);
            }
            Op::ChannelAffine { input, scale, hw } => {
                acc(*input, grads, &mut |g| {
                    for (i, (gi, &go)) in g.iter_mut().zip(gout).enumerate() {
                        *gi += scale[i / hw] * go;
                    }
                });
            }
        }
    }
}
