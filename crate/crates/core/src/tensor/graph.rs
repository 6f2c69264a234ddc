//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order, which is a valid topological order. [`Graph::backward`] consumes
//! the graph, walks the tape once in reverse, and frees each node's buffers
//! as soon as no later node can need them.

use super::conv::{conv2d_backward, conv2d_forward, conv_output_size, ConvGeometry};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d(ConvGeometry),
    Relu,
    MaxPool2d { argmax: Vec<usize> },
    GlobalAvgPool { plane: usize },
    Linear,
    Softmax,
    SoftmaxCrossEntropy { probs: Vec<T>, labels: Vec<usize> },
    Add,
    Mul,
    Scale(T),
    Sum,
    Mean,
    Reshape,
    NhwcToNchw,
    ScatterRows { indices: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Option<Tensor<T>>,
    inputs: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    retain_grad: bool,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    track_params: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph in which parameters are gradient-tracked.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            track_params: true,
        }
    }

    /// Graph in which parameters enter as constants: nothing is recorded
    /// for backpropagation.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn tracks_params(&self) -> bool {
        self.track_params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<usize>, value: Tensor<T>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        // Untracked results are plain constants: drop the saved context.
        let op = if requires_grad { op } else { Op::Leaf };
        let inputs = if requires_grad { inputs } else { Vec::new() };
        self.nodes.push(Node {
            value: Some(value),
            inputs,
            op,
            requires_grad,
            retain_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            inputs: Vec::new(),
            op: Op::Leaf,
            requires_grad,
            retain_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding the current value of a parameter. Each parameter enters
    /// a graph at most once, so all of its uses share one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), self.track_params);
        self.params.push((id, v));
        v
    }

    /// Copy of `v` with no path back to its producer.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Keep the gradient of an intermediate node in the [`Gradients`].
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain_grad = true;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_ref().expect("node values live until backward")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ----- layers -------------------------------------------------------

    /// 2-D convolution over an NCHW input with an `[F, C, kh, kw]` weight.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("input {xs:?} and weight {ws:?} must both be rank 4"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "input channels (axis 1 of input) = {} but weight axis 1 = {}",
                    xs[1], ws[1]
                ),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "bias shape {bs:?} does not match filter count (weight axis 0) = {}",
                    ws[0]
                ),
            ));
        }
        let out_h = conv_output_size(xs[2], ws[2], stride, padding).ok_or_else(|| {
            Error::dim(
                "conv2d",
                format!(
                    "kernel height {} exceeds padded input height (axis 2) {}+2*{padding}",
                    ws[2], xs[2]
                ),
            )
        })?;
        let out_w = conv_output_size(xs[3], ws[3], stride, padding).ok_or_else(|| {
            Error::dim(
                "conv2d",
                format!(
                    "kernel width {} exceeds padded input width (axis 3) {}+2*{padding}",
                    ws[3], xs[3]
                ),
            )
        })?;
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            filters: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            padding,
            out_h,
            out_w,
        };
        let data = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let out = Tensor::new(vec![geom.batch, geom.filters, out_h, out_w], data)?;
        Ok(self.push(Op::Conv2d(geom), vec![x.0, weight.0, bias.0], out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu, vec![x.0], out)
    }

    /// Max pooling without padding. Gradient flows to the first maximum of
    /// each window in row-major order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("max_pool2d", format!("input {xs:?} must be rank 4")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = conv_output_size(h, kernel, stride, 0).ok_or_else(|| {
            Error::dim(
                "max_pool2d",
                format!("window {kernel} exceeds input height (axis 2) {h}"),
            )
        })?;
        let ow = conv_output_size(w, kernel, stride, 0).ok_or_else(|| {
            Error::dim(
                "max_pool2d",
                format!("window {kernel} exceeds input width (axis 3) {w}"),
            )
        })?;
        let input = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for bc in 0..b * c {
            let base = bc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for i in 0..kernel {
                        for j in 0..kernel {
                            let idx = base + (oy * stride + i) * w + ox * stride + j;
                            if input[idx] > input[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(input[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2d { argmax }, vec![x.0], out))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("global_avg_pool", format!("input {xs:?} must be rank 4")));
        }
        let plane = xs[2] * xs[3];
        let inv = T::one() / T::from_usize(plane).unwrap();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![xs[0], xs[1]], data)?;
        Ok(self.push(Op::GlobalAvgPool { plane }, vec![x.0], out))
    }

    /// `x·Wᵀ + b` with `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::dim(
                "linear",
                format!("input {xs:?} (axis 1 = features), weight {ws:?} (axis 1 = features), bias {bs:?}"),
            ));
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * fan_out];
        for (row, b) in out.chunks_mut(fan_out).zip(std::iter::repeat(self.value(bias).data())) {
            row.copy_from_slice(b);
        }
        T::gemm(
            batch,
            fan_in,
            fan_out,
            T::one(),
            self.value(x).data(),
            (fan_in as isize, 1),
            self.value(weight).data(),
            (1, fan_in as isize),
            T::one(),
            &mut out,
            (fan_out as isize, 1),
        );
        let out = Tensor::new(vec![batch, fan_out], out)?;
        Ok(self.push(Op::Linear, vec![x.0, weight.0, bias.0], out))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let width = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(width) {
            softmax_row(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(Op::Softmax, vec![x.0], out)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {ls:?} (axis 0 = batch) vs {} labels", labels.len()),
            ));
        }
        let classes = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
            softmax_row(row);
        }
        let n = T::from_usize(labels.len()).unwrap();
        let out = Tensor::scalar(loss / n);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            vec![logits.0],
            out,
        ))
    }

    // ----- elementwise and structural ----------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(Op::Add, vec![a.0, b.0], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Mul, vec![a.0, b.0], out))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(Op::Scale(factor), vec![a.0], out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum, vec![a.0], out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap());
        self.push(Op::Mean, vec![a.0], out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![a.0], out))
    }

    /// `[B, H, W, C] -> [B, C, H, W]`.
    pub fn nhwc_to_nchw(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("nhwc_to_nchw", format!("input {s:?} must be rank 4")));
        }
        let data = permute_nhwc_to_nchw(self.value(a).data(), s[0], s[1], s[2], s[3]);
        let out = Tensor::new(vec![s[0], s[3], s[1], s[2]], data)?;
        Ok(self.push(Op::NhwcToNchw, vec![a.0], out))
    }

    /// Replaces rows of `base` (viewed as `[rows, width]`, width = last axis)
    /// with the rows of `updates` (`[k, width]`) at `indices`.
    ///
    /// Overwritten rows of `base` receive zero gradient.
    pub fn scatter_rows(&mut self, base: Var, updates: Var, indices: &[usize]) -> Result<Var> {
        let bs = self.shape(base).to_vec();
        let us = self.shape(updates).to_vec();
        let width = *bs.last().unwrap();
        let rows = self.value(base).len() / width;
        if us.len() != 2 || us[1] != width || us[0] != indices.len() {
            return Err(Error::dim(
                "scatter_rows",
                format!(
                    "updates {us:?} must be [{}, {width}] to match base {bs:?}",
                    indices.len()
                ),
            ));
        }
        let mut seen = vec![false; rows];
        for &i in indices {
            if i >= rows {
                return Err(Error::Index(format!("row {i} out of range for {rows} rows")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("row {i} scattered twice")));
            }
        }
        let mut out = self.value(base).clone();
        let src = self.value(updates).data();
        for (r, &i) in indices.iter().enumerate() {
            out.data_mut()[i * width..(i + 1) * width].copy_from_slice(&src[r * width..(r + 1) * width]);
        }
        Ok(self.push(
            Op::ScatterRows {
                indices: indices.to_vec(),
            },
            vec![base.0, updates.0],
            out,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ----- backward -----------------------------------------------------

    /// Reverse pass from a scalar `loss`, consuming the graph.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut result = Gradients {
            grads: vec![None; self.nodes.len()],
            params: std::mem::take(&mut self.params),
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(result);
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(grad) = pending[i].take() else {
                self.nodes[i].value = None;
                continue;
            };
            let node = &self.nodes[i];
            if node.inputs.is_empty() {
                if node.requires_grad {
                    result.grads[i] = Some(grad);
                }
                self.nodes[i].value = None;
                continue;
            }
            let input_grads = self.op_backward(i, &grad)?;
            if node.retain_grad {
                result.grads[i] = Some(grad);
            }
            let inputs = self.nodes[i].inputs.clone();
            for (inp, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[inp].requires_grad {
                    continue;
                }
                match &mut pending[inp] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            self.nodes[i].value = None;
        }
        Ok(result)
    }

    fn input_value(&self, node: usize, k: usize) -> &Tensor<T> {
        self.nodes[self.nodes[node].inputs[k]]
            .value
            .as_ref()
            .expect("inputs outlive their consumers")
    }

    fn input_needs_grad(&self, node: usize, k: usize) -> bool {
        self.nodes[self.nodes[node].inputs[k]].requires_grad
    }

    fn op_backward(&self, i: usize, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[i];
        let out = node.value.as_ref().expect("value present during backward");
        let g = grad.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d(geom) => {
                let x = self.input_value(i, 0);
                let w = self.input_value(i, 1);
                let need = (
                    self.input_needs_grad(i, 0),
                    self.input_needs_grad(i, 1),
                    self.input_needs_grad(i, 2),
                );
                let grads = conv2d_backward(geom, x.data(), w.data(), g, need);
                let wrap =
                    |d: Option<Vec<T>>, like: &Tensor<T>| d.map(|d| Tensor::new(like.shape().to_vec(), d).unwrap());
                vec![
                    wrap(grads.input, x),
                    wrap(grads.weight, w),
                    wrap(grads.bias, self.input_value(i, 2)),
                ]
            }
            Op::Relu => {
                let data = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gy)| if y > T::zero() { gy } else { T::zero() })
                    .collect();
                vec![Some(Tensor::new(out.shape().to_vec(), data)?)]
            }
            Op::MaxPool2d { argmax } => {
                let x = self.input_value(i, 0);
                let mut dx = Tensor::zeros(x.shape());
                for (&idx, &gy) in argmax.iter().zip(g) {
                    dx.data_mut()[idx] += gy;
                }
                vec![Some(dx)]
            }
            Op::GlobalAvgPool { plane } => {
                let x = self.input_value(i, 0);
                let inv = T::one() / T::from_usize(*plane).unwrap();
                let mut dx = Vec::with_capacity(x.len());
                for &gy in g {
                    dx.extend(std::iter::repeat_n(gy * inv, *plane));
                }
                vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            Op::Linear => {
                let x = self.input_value(i, 0);
                let w = self.input_value(i, 1);
                let (batch, fan_in) = (x.shape()[0], x.shape()[1]);
                let fan_out = w.shape()[0];
                let dx = self.input_needs_grad(i, 0).then(|| {
                    let mut dx = vec![T::zero(); batch * fan_in];
                    T::gemm(
                        batch,
                        fan_out,
                        fan_in,
                        T::one(),
                        g,
                        (fan_out as isize, 1),
                        w.data(),
                        (fan_in as isize, 1),
                        T::zero(),
                        &mut dx,
                        (fan_in as isize, 1),
                    );
                    Tensor::new(x.shape().to_vec(), dx).unwrap()
                });
                let dw = self.input_needs_grad(i, 1).then(|| {
                    let mut dw = vec![T::zero(); fan_out * fan_in];
                    T::gemm(
                        fan_out,
                        batch,
                        fan_in,
                        T::one(),
                        g,
                        (1, fan_out as isize),
                        x.data(),
                        (fan_in as isize, 1),
                        T::zero(),
                        &mut dw,
                        (fan_in as isize, 1),
                    );
                    Tensor::new(w.shape().to_vec(), dw).unwrap()
                });
                let db = self.input_needs_grad(i, 2).then(|| {
                    let mut db = Tensor::zeros(&[fan_out]);
                    for row in g.chunks(fan_out) {
                        for (acc, &v) in db.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    db
                });
                vec![dx, dw, db]
            }
            Op::Softmax => {
                let width = *out.shape().last().unwrap();
                let mut dx = Vec::with_capacity(out.len());
                for (y, gy) in out.data().chunks(width).zip(g.chunks(width)) {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    dx.extend(y.iter().zip(gy).map(|(&a, &b)| a * (b - dot)));
                }
                vec![Some(Tensor::new(out.shape().to_vec(), dx)?)]
            }
            Op::SoftmaxCrossEntropy { probs, labels } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                let mut dx = probs.clone();
                for (row, &label) in dx.chunks_mut(classes).zip(labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![Some(Tensor::new(vec![labels.len(), classes], dx)?)]
            }
            Op::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Op::Mul => {
                let a = self.input_value(i, 0);
                let b = self.input_value(i, 1);
                let da = b.data().iter().zip(g).map(|(&y, &gy)| y * gy).collect();
                let db = a.data().iter().zip(g).map(|(&x, &gy)| x * gy).collect();
                vec![
                    Some(Tensor::new(a.shape().to_vec(), da)?),
                    Some(Tensor::new(b.shape().to_vec(), db)?),
                ]
            }
            Op::Scale(factor) => vec![Some(grad.map(|v| v * *factor))],
            Op::Sum => {
                let x = self.input_value(i, 0);
                vec![Some(Tensor::full(x.shape(), g[0]))]
            }
            Op::Mean => {
                let x = self.input_value(i, 0);
                let n = T::from_usize(x.len()).unwrap();
                vec![Some(Tensor::full(x.shape(), g[0] / n))]
            }
            Op::Reshape => {
                let x = self.input_value(i, 0);
                vec![Some(grad.clone().reshape(x.shape())?)]
            }
            Op::NhwcToNchw => {
                let x = self.input_value(i, 0);
                let s = x.shape();
                let data = permute_nchw_to_nhwc(g, s[0], s[1], s[2], s[3]);
                vec![Some(Tensor::new(s.to_vec(), data)?)]
            }
            Op::ScatterRows { indices } => {
                let width = *out.shape().last().unwrap();
                let mut dbase = grad.clone();
                let mut drows = Vec::with_capacity(indices.len() * width);
                for &r in indices {
                    drows.extend_from_slice(&g[r * width..(r + 1) * width]);
                    dbase.data_mut()[r * width..(r + 1) * width].fill(T::zero());
                }
                vec![Some(dbase), Some(Tensor::new(vec![indices.len(), width], drows)?)]
            }
        })
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `[B, H, W, C]` data to `[B, C, H, W]`.
pub(crate) fn permute_nhwc_to_nchw<T: Copy>(src: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        let img = &src[bi * h * w * c..(bi + 1) * h * w * c];
        for ci in 0..c {
            out.extend((0..h * w).map(|pos| img[pos * c + ci]));
        }
    }
    out
}

/// Inverse of [`permute_nhwc_to_nchw`]: `[B, C, H, W]` data laid out back as
/// `[B, H, W, C]`, where `h, w, c` describe the NHWC target.
pub(crate) fn permute_nchw_to_nhwc<T: Copy>(src: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        let img = &src[bi * h * w * c..(bi + 1) * h * w * c];
        for pos in 0..h * w {
            out.extend((0..c).map(|ci| img[ci * h * w + pos]));
        }
    }
    out
}

/// Gradients produced by [`Graph::backward`].
///
/// Only gradient-tracked leaves (and nodes marked with
/// [`Graph::retain_grad`]) that the loss actually reaches hold a value.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.get(v))
    }

    /// Parameter gradients in graph insertion order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(|&(p, v)| self.get(v).map(|g| (p, g)))
    }
}
