//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive call appends a node holding its output value and the
//! [`Var`]s it consumed. Because a node can only reference nodes recorded
//! before it, the recording order is a topological order and the backward
//! sweep is a single reverse pass over the node list.

use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Conv2d { input: Var, kernels: Var, bias: Var, stride: usize, padding: usize },
    Relu(Var),
    AvgPool { input: Var, size: usize },
    GlobalAvgPool(Var),
    Dense { input: Var, weight: Var, bias: Var },
    Softmax(Var),
    CrossEntropy { scores: Var, target: usize },
    Pick { input: Var, index: usize },
    Slice { input: Var, start: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Vec<Var>),
    Mean(Vec<Var>),
    Stack(Vec<Var>),
    SqDistance(Var, Var),
    /// `Σ_c w_c A_c` over a `[C,h,w]` input with constant weights.
    ChannelWeightedSum { input: Var, weights: Vec<f64> },
    Upsample { input: Var },
    /// `x / max(x)` when `max(x) > 0`, identity otherwise.
    NormalizeByMax(Var),
    /// `1 - dice(x, mask)` against a constant mask.
    DiceLoss { input: Var, mask: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
///
/// A tape is single-threaded; independent samples use independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<Var>,
}

impl Gradients {
    /// Gradient of the swept output with respect to `var`; zeros if untouched.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros_like_shape(&self.shapes[var.0]),
        }
    }

    /// Take ownership of a gradient without cloning.
    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros_like_shape(&self.shapes[var.0]))
    }

    /// Nodes whose backward rule ran, in the order they ran.
    pub fn visited(&self) -> &[Var] {
        &self.visited
    }
}

impl Tensor {
    pub(crate) fn zeros_like_shape(shape: &[usize]) -> Tensor {
        if shape.is_empty() {
            Tensor::scalar(0.0)
        } else {
            Tensor::zeros(shape)
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameters, or the point of a gradient check).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient (images, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Constant, value, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(kernels), self.value(bias), stride, padding)?;
        Ok(self.push(Op::Conv2d { input, kernels, bias, stride, padding }, y, &[input, kernels, bias]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = ops::relu(self.value(input));
        self.push(Op::Relu(input), y, &[input])
    }

    pub fn avg_pool(&mut self, input: Var, size: usize) -> Result<Var> {
        let y = ops::avg_pool(self.value(input), size)?;
        Ok(self.push(Op::AvgPool { input, size }, y, &[input]))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(Op::GlobalAvgPool(input), y, &[input]))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(Op::Dense { input, weight, bias }, y, &[input, weight, bias]))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let p = ops::softmax(x.data())?;
        let y = Tensor::new(x.shape(), p)?;
        Ok(self.push(Op::Softmax(input), y, &[input]))
    }

    pub fn cross_entropy(&mut self, scores: Var, target: usize) -> Result<Var> {
        let ce = ops::cross_entropy(self.value(scores).data(), target)?;
        Ok(self.push(Op::CrossEntropy { scores, target }, Tensor::scalar(ce), &[scores]))
    }

    /// One element of a tensor, as a scalar.
    pub fn pick(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        let v = *x.data().get(index).ok_or_else(|| {
            Error::dim("index", format!("{index} out of range for {} values", x.len()))
        })?;
        Ok(self.push(Op::Pick { input, index }, Tensor::scalar(v), &[input]))
    }

    /// A contiguous run of values viewed with a new shape.
    pub fn slice(&mut self, input: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let x = self.value(input);
        if start + n > x.len() {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} exceeds {} values", start + n, x.len()),
            ));
        }
        let y = Tensor::new(shape, x.data()[start..start + n].to_vec())?;
        Ok(self.push(Op::Slice { input, start }, y, &[input]))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                "operands",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(Op::Add(a, b), y, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let y = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(Op::Mul(a, b), y, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let y = Tensor::new(x.shape(), x.data().iter().map(|v| v * factor).collect()).expect("shape preserved");
        self.push(Op::Scale(input, factor), y, &[input])
    }

    /// Elementwise sum of same-shaped values.
    pub fn sum(&mut self, inputs: &[Var]) -> Result<Var> {
        let y = self.reduce(inputs)?;
        Ok(self.push(Op::Sum(inputs.to_vec()), y, inputs))
    }

    /// Elementwise mean of same-shaped values.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let mut y = self.reduce(inputs)?;
        let inv = 1.0 / inputs.len() as f64;
        y.data_mut().iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Op::Mean(inputs.to_vec()), y, inputs))
    }

    fn reduce(&self, inputs: &[Var]) -> Result<Tensor> {
        let first = *inputs.first().ok_or_else(|| Error::dim("inputs", "reduction over zero values"))?;
        let mut acc = self.value(first).clone();
        for &v in &inputs[1..] {
            self.same_shape(first, v)?;
            for (a, b) in acc.data_mut().iter_mut().zip(self.value(v).data()) {
                *a += b;
            }
        }
        Ok(acc)
    }

    /// Concatenate scalars into a vector.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::dim("inputs", "stack of zero values"));
        }
        let mut data = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let x = self.value(v);
            if x.len() != 1 {
                return Err(Error::dim("inputs", format!("stack expects scalars, got {:?}", x.shape())));
            }
            data.push(x.item());
        }
        Ok(self.push(Op::Stack(inputs.to_vec()), Tensor::vector(data), inputs))
    }

    /// `Σ (a - b)²` as a scalar.
    pub fn sq_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let d: f64 = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Op::SqDistance(a, b), Tensor::scalar(d), &[a, b]))
    }

    pub fn channel_weighted_sum(&mut self, input: Var, weights: &[f64]) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 3 || s[0] != weights.len() {
            return Err(Error::dim(
                "channels",
                format!("{} weights for input of shape {s:?}", weights.len()),
            ));
        }
        let plane = s[1] * s[2];
        let mut out = vec![0.0; plane];
        for (c, &w) in weights.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&x.data()[c * plane..(c + 1) * plane]) {
                *o += w * v;
            }
        }
        let y = Tensor::new(&[s[1], s[2]], out)?;
        Ok(self.push(Op::ChannelWeightedSum { input, weights: weights.to_vec() }, y, &[input]))
    }

    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::upsample_bilinear(self.value(input), out_h, out_w)?;
        Ok(self.push(Op::Upsample { input }, y, &[input]))
    }

    pub fn normalize_by_max(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let m = x.data()[ops::argmax(x.data())];
        let y = if m > 0.0 {
            Tensor::new(x.shape(), x.data().iter().map(|v| v / m).collect()).expect("shape preserved")
        } else {
            x.clone()
        };
        self.push(Op::NormalizeByMax(input), y, &[input])
    }

    pub fn dice_loss(&mut self, input: Var, mask: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if x.len() != mask.len() {
            return Err(Error::dim(
                "mask",
                format!("{} mask values for input of shape {:?}", mask.len(), x.shape()),
            ));
        }
        let loss = 1.0 - ops::soft_dice(x.data(), mask);
        Ok(self.push(Op::DiceLoss { input, mask: mask.to_vec() }, Tensor::scalar(loss), &[input]))
    }

    /// Full reverse sweep from a scalar output.
    ///
    /// Every leaf reachable backward from `output` receives its gradient;
    /// unreachable leaves report zeros through [`Gradients::wrt`].
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.sweep(output, 0, |_| true)
    }

    /// Gradient of a scalar `output` with respect to one intermediate `wrt`.
    ///
    /// Only nodes recorded at or after `wrt` can lie on a path to it, so the
    /// sweep stops there.
    pub fn grad_of(&self, output: Var, wrt: Var) -> Result<Tensor> {
        let mut g = self.sweep(output, wrt.0, |v| v == wrt.0)?;
        Ok(g.take(wrt))
    }

    fn sweep(&self, output: Var, floor: usize, keep: impl Fn(usize) -> bool) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::contract("output is not on this tape"));
        }
        if !self.value(output).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::new(self.value(output).shape(), vec![1.0])?);
        let mut visited = Vec::new();
        for i in (floor..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match (&node.op, keep(i)) {
                (Op::Leaf, _) | (_, true) => match &grads[i] {
                    Some(g) => g.clone(),
                    None => continue,
                },
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            visited.push(Var(i));
            self.backward_node(&node.op, &node.value, g, &mut grads, floor)?;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visited,
        })
    }

    fn wants(&self, v: Var, floor: usize) -> bool {
        v.0 >= floor && self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>], floor: usize) -> Result<()> {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d { input, kernels, bias, stride, padding } => {
                let need_input = self.wants(*input, floor);
                let (dx, dk, db) =
                    ops::conv2d_backward(self.value(*input), self.value(*kernels), &g, *stride, *padding, need_input)?;
                if let Some(dx) = dx {
                    accumulate(&mut grads[input.0], dx);
                }
                if self.wants(*kernels, floor) {
                    accumulate(&mut grads[kernels.0], dk);
                }
                if self.wants(*bias, floor) {
                    accumulate(&mut grads[bias.0], db);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x, floor) {
                    accumulate(&mut grads[x.0], ops::relu_backward(self.value(*x), &g));
                }
            }
            Op::AvgPool { input, size } => {
                if self.wants(*input, floor) {
                    accumulate(&mut grads[input.0], ops::avg_pool_backward(self.value(*input).shape(), *size, &g));
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x, floor) {
                    accumulate(&mut grads[x.0], ops::global_avg_pool_backward(self.value(*x).shape(), &g));
                }
            }
            Op::Dense { input, weight, bias } => {
                let (dx, dw, db) = ops::dense_backward(self.value(*input), self.value(*weight), &g);
                if self.wants(*input, floor) {
                    accumulate(&mut grads[input.0], dx);
                }
                if self.wants(*weight, floor) {
                    accumulate(&mut grads[weight.0], dw);
                }
                if self.wants(*bias, floor) {
                    accumulate(&mut grads[bias.0], db);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x, floor) {
                    let d = ops::softmax_backward(out.data(), g.data());
                    accumulate(&mut grads[x.0], Tensor::new(out.shape(), d)?);
                }
            }
            Op::CrossEntropy { scores, target } => {
                if self.wants(*scores, floor) {
                    let s = self.value(*scores);
                    let d = ops::cross_entropy_backward(s.data(), *target, g.item());
                    accumulate(&mut grads[scores.0], Tensor::new(s.shape(), d)?);
                }
            }
            Op::Pick { input, index } => {
                if self.wants(*input, floor) {
                    let mut d = Tensor::zeros_like_shape(self.value(*input).shape());
                    d.data_mut()[*index] = g.item();
                    accumulate(&mut grads[input.0], d);
                }
            }
            Op::Slice { input, start } => {
                if self.wants(*input, floor) {
                    let mut d = Tensor::zeros_like_shape(self.value(*input).shape());
                    d.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads[input.0], d);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a, floor) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b, floor) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a, floor) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], Tensor::new(va.shape(), d)?);
                }
                if self.wants(*b, floor) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], Tensor::new(vb.shape(), d)?);
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x, floor) {
                    let d = g.data().iter().map(|v| v * f).collect();
                    accumulate(&mut grads[x.0], Tensor::new(g.shape(), d)?);
                }
            }
            Op::Sum(xs) => {
                for x in xs {
                    if self.wants(*x, floor) {
                        accumulate(&mut grads[x.0], g.clone());
                    }
                }
            }
            Op::Mean(xs) => {
                let inv = 1.0 / xs.len() as f64;
                let d = Tensor::new(g.shape(), g.data().iter().map(|v| v * inv).collect())?;
                for x in xs {
                    if self.wants(*x, floor) {
                        accumulate(&mut grads[x.0], d.clone());
                    }
                }
            }
            Op::Stack(xs) => {
                for (x, &gv) in xs.iter().zip(g.data()) {
                    if self.wants(*x, floor) {
                        let mut d = Tensor::zeros_like_shape(self.value(*x).shape());
                        d.data_mut()[0] = gv;
                        accumulate(&mut grads[x.0], d);
                    }
                }
            }
            Op::SqDistance(a, b) => {
                let gv = g.item();
                let (va, vb) = (self.value(*a), self.value(*b));
                let diff: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| 2.0 * gv * (x - y)).collect();
                if self.wants(*a, floor) {
                    accumulate(&mut grads[a.0], Tensor::new(va.shape(), diff.clone())?);
                }
                if self.wants(*b, floor) {
                    let neg = diff.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b.0], Tensor::new(vb.shape(), neg)?);
                }
            }
            Op::ChannelWeightedSum { input, weights } => {
                if self.wants(*input, floor) {
                    let shape = self.value(*input).shape();
                    let mut d = Vec::with_capacity(shape.iter().product());
                    for &w in weights {
                        d.extend(g.data().iter().map(|v| v * w));
                    }
                    accumulate(&mut grads[input.0], Tensor::new(shape, d)?);
                }
            }
            Op::Upsample { input } => {
                if self.wants(*input, floor) {
                    let d = ops::upsample_bilinear_backward(self.value(*input).shape(), &g);
                    accumulate(&mut grads[input.0], d);
                }
            }
            Op::NormalizeByMax(input) => {
                if self.wants(*input, floor) {
                    let x = self.value(*input);
                    let am = ops::argmax(x.data());
                    let m = x.data()[am];
                    let d = if m > 0.0 {
                        let mut d: Vec<f64> = g.data().iter().map(|v| v / m).collect();
                        let gx: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
                        d[am] -= gx / (m * m);
                        d
                    } else {
                        g.data().to_vec()
                    };
                    accumulate(&mut grads[input.0], Tensor::new(x.shape(), d)?);
                }
            }
            Op::DiceLoss { input, mask } => {
                if self.wants(*input, floor) {
                    let x = self.value(*input);
                    let inter: f64 = x.data().iter().zip(mask).map(|(a, b)| a * b).sum();
                    let den: f64 = x.data().iter().sum::<f64>() + mask.iter().sum::<f64>();
                    let gv = g.item();
                    let d = if den == 0.0 {
                        vec![0.0; x.len()]
                    } else {
                        mask.iter()
                            .map(|&m| -gv * (2.0 * m * den - 2.0 * inter) / (den * den))
                            .collect()
                    };
                    accumulate(&mut grads[input.0], Tensor::new(x.shape(), d)?);
                }
            }
        }
        Ok(())
    }
}
