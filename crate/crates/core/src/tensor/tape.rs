//! Reverse-mode gradient tape.
//!
//! Every differentiable operation appends one node holding its output value
//! and the handles of its operands. [`Tape::backward`] consumes the tape and
//! replays it in reverse, summing gradients when a node feeds several
//! consumers; a parameter reused by several circles therefore receives the
//! sum of its per-use gradients.

use std::collections::BTreeMap;

use super::kernels::{self, RoiBox};
use super::optim::{Gradients, ParamStore};
use super::{numel, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    Upsample { input: Var, factor: usize },
    Add(Var, Var),
    AddBias { input: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    Linear { input: Var, weight: Var },
    Scale { input: Var, factor: S },
    Sum(Var),
    Gather { input: Var, index: Vec<usize> },
    Concat(Vec<Var>),
    RoiPool { input: Var, argmax: Vec<Option<usize>> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, weights: Vec<S>, probs: Vec<S> },
    SmoothL1 { pred: Var, target: Vec<S>, weights: Vec<S> },
    Bce { probs: Var, mask: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A scalar loss node plus a flag for degenerate inputs (an empty sample
/// set yields a constant zero).
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub var: Var,
    pub degenerate: bool,
}

/// Parameter handles bound onto one tape, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("params", format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<Var, String>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input (no gradient is tracked through it).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor<S>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(v, name.to_string());
        v
    }

    /// Registers every parameter of `store` exactly once.
    pub fn bind(&mut self, store: &ParamStore<S>) -> ParamVars {
        let vars = store
            .iter()
            .map(|(name, t)| (name.to_string(), self.param(name, t.clone())))
            .collect();
        ParamVars { vars }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.needs(input) || self.needs(kernel);
        Ok(self.push(out, Op::Conv2d { input, kernel, stride, padding }, rg))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be at least 1"));
        }
        let out = kernels::upsample_forward(self.value(input), factor);
        let rg = self.needs(input);
        Ok(self.push(out, Op::Upsample { input, factor }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "add", left: sa.to_vec(), right: sb.to_vec() });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(sa, data)?, Op::Add(a, b), rg))
    }

    /// Adds a per-channel bias of shape `1 x C x 1 x 1`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let s = self.shape(input);
        let bs = self.shape(bias);
        if bs != [1, s[1], 1, 1] {
            return Err(Error::ShapeMismatch { op: "add_bias", left: s.to_vec(), right: bs.to_vec() });
        }
        let hw = s[2] * s[3];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(input).clone();
        for (i, plane) in out.data_mut().chunks_mut(hw.max(1)).enumerate() {
            let bv = b[i % s[1]];
            for v in plane {
                *v += bv;
            }
        }
        let rg = self.needs(input) || self.needs(bias);
        Ok(self.push(out, Op::AddBias { input, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        let rg = self.needs(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v = S::one() / (S::one() + (-*v).exp());
        }
        let rg = self.needs(input);
        self.push(out, Op::Sigmoid(input), rg)
    }

    /// Fully connected layer: input `N x ...` is flattened per sample and
    /// multiplied by `weight` of shape `O x I x 1 x 1`; output is `N x O x 1 x 1`.
    pub fn linear(&mut self, input: Var, weight: Var) -> Result<Var> {
        let s = self.shape(input);
        let ws = self.shape(weight);
        let n = s[0];
        let inner = s[1] * s[2] * s[3];
        if ws[1] * ws[2] * ws[3] != inner {
            return Err(Error::ShapeMismatch { op: "linear", left: s.to_vec(), right: ws.to_vec() });
        }
        let o = ws[0];
        let mut out = vec![S::zero(); n * o];
        gemm(false, true, n, o, inner, self.value(input).data(), self.value(weight).data(), S::zero(), &mut out);
        let rg = self.needs(input) || self.needs(weight);
        Ok(self.push(Tensor::new([n, o, 1, 1], out)?, Op::Linear { input, weight }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Var {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v *= factor;
        }
        let rg = self.needs(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// Sum of all elements as a `1 x 1 x 1 x 1` scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).sum();
        let rg = self.needs(input);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    /// Sum of several scalar (or same-shaped) nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Tensor::scalar(S::zero())));
        };
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Picks elements by flat index into a new tensor of the given shape.
    pub fn gather(&mut self, input: Var, index: Vec<usize>, shape: Shape) -> Result<Var> {
        if index.len() != numel(&shape) {
            return Err(Error::invalid("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        let src = self.value(input).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid("gather", format!("index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let rg = self.needs(input);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { input, index }, rg))
    }

    /// Concatenates along the batch axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<S>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        if values.is_empty() {
            return Err(Error::invalid("concat", "nothing to concatenate"));
        }
        let out = Tensor::stack(&values)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Max-pools each region into an `out_h x out_w` grid. Also returns, per
    /// region, whether it missed the feature map (its output is all zero).
    pub fn roi_pool(&mut self, input: Var, rois: &[RoiBox], out_h: usize, out_w: usize) -> Result<(Var, Vec<bool>)> {
        let (out, argmax, empty) = kernels::roi_pool_forward(self.value(input), rois, out_h, out_w)?;
        let rg = self.needs(input);
        Ok((self.push(out, Op::RoiPool { input, argmax }, rg), empty))
    }

    /// Mean over samples of the weighted negative log-softmax probability of
    /// each sample's label. `logits` is `N x K x 1 x 1`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Option<&[S]>) -> Result<LossValue> {
        let s = self.shape(logits);
        let n = s[0];
        let k = s[1] * s[2] * s[3];
        if labels.len() != n {
            return Err(Error::invalid("softmax_cross_entropy", format!("{} labels for {n} samples", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("softmax_cross_entropy", format!("label {bad} outside {k} classes")));
        }
        let weights = match weights {
            Some(w) if w.len() != n => {
                return Err(Error::invalid("softmax_cross_entropy", format!("{} weights for {n} samples", w.len())))
            }
            Some(w) if w.iter().any(|&v| v < S::zero()) => {
                return Err(Error::invalid("softmax_cross_entropy", "weights must be non-negative"))
            }
            Some(w) => w.to_vec(),
            None => vec![S::one(); n],
        };
        if n == 0 {
            return Ok(LossValue { var: self.constant(Tensor::scalar(S::zero())), degenerate: true });
        }
        let z = self.value(logits).data();
        let mut probs = vec![S::zero(); n * k];
        let mut total = S::zero();
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            total += weights[i] * (lse - row[labels[i]]);
        }
        let value = total / S::of(n as f64);
        let rg = self.needs(logits);
        let var = self.push(
            Tensor::scalar(value),
            Op::SoftmaxCe { logits, labels: labels.to_vec(), weights, probs },
            rg,
        );
        Ok(LossValue { var, degenerate: false })
    }

    /// Mean over elements of the smooth-L1 residual, each element scaled by
    /// its sample's weight (samples run along the batch axis).
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<S>, weights: Option<&[S]>) -> Result<LossValue> {
        let s = self.shape(pred);
        if s != target.shape() {
            return Err(Error::ShapeMismatch { op: "smooth_l1", left: s.to_vec(), right: target.shape().to_vec() });
        }
        let n = s[0];
        let per = s[1] * s[2] * s[3];
        let sample_w = match weights {
            Some(w) if w.len() != n => return Err(Error::invalid("smooth_l1", format!("{} weights for {n} samples", w.len()))),
            Some(w) => w.to_vec(),
            None => vec![S::one(); n],
        };
        if n * per == 0 {
            return Ok(LossValue { var: self.constant(Tensor::scalar(S::zero())), degenerate: true });
        }
        let weights: Vec<S> = sample_w.iter().flat_map(|&w| std::iter::repeat_n(w, per)).collect();
        let half = S::of(0.5);
        let mut total = S::zero();
        for ((&p, &t), &w) in self.value(pred).data().iter().zip(target.data()).zip(&weights) {
            let d = (p - t).abs();
            total += w * if d < S::one() { half * d * d } else { d - half };
        }
        let value = total / S::of((n * per) as f64);
        let rg = self.needs(pred);
        let var = self.push(
            Tensor::scalar(value),
            Op::SmoothL1 { pred, target: target.data().to_vec(), weights },
            rg,
        );
        Ok(LossValue { var, degenerate: false })
    }

    /// Mean binary cross-entropy of probabilities against a {0,1} mask,
    /// probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, mask: &Tensor<S>) -> Result<LossValue> {
        let s = self.shape(probs);
        if s != mask.shape() {
            return Err(Error::ShapeMismatch { op: "binary_cross_entropy", left: s.to_vec(), right: mask.shape().to_vec() });
        }
        if mask.numel() == 0 {
            return Ok(LossValue { var: self.constant(Tensor::scalar(S::zero())), degenerate: true });
        }
        let eps = S::of(BCE_EPS);
        let mut total = S::zero();
        for (&p, &m) in self.value(probs).data().iter().zip(mask.data()) {
            let p = p.max(eps).min(S::one() - eps);
            total -= m * p.ln() + (S::one() - m) * (S::one() - p).ln();
        }
        let value = total / S::of(mask.numel() as f64);
        let rg = self.needs(probs);
        let var = self.push(Tensor::scalar(value), Op::Bce { probs, mask: mask.data().to_vec() }, rg);
        Ok(LossValue { var, degenerate: false })
    }

    /// Consumes the tape and returns gradients of `loss` with respect to every
    /// node. `loss` must hold exactly one value.
    pub fn backward(self, loss: Var) -> Result<Grads<S>> {
        let ls = self.shape(loss);
        if numel(&ls) != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got shape {ls:?}")));
        }
        let Tape { nodes, params } = self;
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |v: &Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Conv2d { input, kernel, stride, padding } => {
                    let (gi, gk) = kernels::conv2d_backward(
                        &nodes[input.0].value,
                        &nodes[kernel.0].value,
                        &g,
                        *stride,
                        *padding,
                        needs(input),
                    )?;
                    if let Some(gi) = gi {
                        accumulate(&mut grads, *input, gi);
                    }
                    if needs(kernel) {
                        accumulate(&mut grads, *kernel, gk);
                    }
                }
                Op::Upsample { input, factor } => {
                    let gi = kernels::upsample_backward(nodes[input.0].value.shape(), &g, *factor);
                    accumulate(&mut grads, *input, gi);
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddBias { input, bias } => {
                    let s = node.value.shape();
                    if needs(bias) {
                        let hw = (s[2] * s[3]).max(1);
                        let mut gb = vec![S::zero(); s[1]];
                        for (i, plane) in g.chunks(hw).enumerate() {
                            gb[i % s[1]] += plane.iter().copied().sum::<S>();
                        }
                        accumulate(&mut grads, *bias, gb);
                    }
                    if needs(input) {
                        accumulate(&mut grads, *input, g);
                    }
                }
                Op::Relu(input) => {
                    let gi = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| if y > S::zero() { gv } else { S::zero() })
                        .collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::Sigmoid(input) => {
                    let gi = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * y * (S::one() - y))
                        .collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::Linear { input, weight } => {
                    let xs = nodes[input.0].value.shape();
                    let ws = nodes[weight.0].value.shape();
                    let (n, inner, o) = (xs[0], xs[1] * xs[2] * xs[3], ws[0]);
                    if needs(weight) {
                        let mut gw = vec![S::zero(); o * inner];
                        gemm(true, false, o, inner, n, &g, nodes[input.0].value.data(), S::zero(), &mut gw);
                        accumulate(&mut grads, *weight, gw);
                    }
                    if needs(input) {
                        let mut gx = vec![S::zero(); n * inner];
                        gemm(false, false, n, inner, o, &g, nodes[weight.0].value.data(), S::zero(), &mut gx);
                        accumulate(&mut grads, *input, gx);
                    }
                }
                Op::Scale { input, factor } => {
                    let gi = g.iter().map(|&v| v * *factor).collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::Sum(input) => {
                    let n = nodes[input.0].value.numel();
                    accumulate(&mut grads, *input, vec![g[0]; n]);
                }
                Op::Gather { input, index } => {
                    let mut gi = vec![S::zero(); nodes[input.0].value.numel()];
                    for (&i, &gv) in index.iter().zip(&g) {
                        gi[i] += gv;
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = nodes[p.0].value.numel();
                        if needs(p) {
                            accumulate(&mut grads, *p, g[off..off + n].to_vec());
                        }
                        off += n;
                    }
                }
                Op::RoiPool { input, argmax } => {
                    let mut gi = vec![S::zero(); nodes[input.0].value.numel()];
                    for (src, &gv) in argmax.iter().zip(&g) {
                        if let Some(i) = src {
                            gi[*i] += gv;
                        }
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::SoftmaxCe { logits, labels, weights, probs } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / S::of(n as f64);
                    let mut gi = vec![S::zero(); probs.len()];
                    for i in 0..n {
                        let w = weights[i] * scale;
                        for j in 0..k {
                            let target = if j == labels[i] { S::one() } else { S::zero() };
                            gi[i * k + j] = w * (probs[i * k + j] - target);
                        }
                    }
                    accumulate(&mut grads, *logits, gi);
                }
                Op::SmoothL1 { pred, target, weights } => {
                    let scale = g[0] / S::of(target.len() as f64);
                    let gi = nodes[pred.0]
                        .value
                        .data()
                        .iter()
                        .zip(target)
                        .zip(weights)
                        .map(|((&p, &t), &w)| {
                            let d = p - t;
                            let slope = if d.abs() < S::one() { d } else { d.signum() };
                            w * scale * slope
                        })
                        .collect();
                    accumulate(&mut grads, *pred, gi);
                }
                Op::Bce { probs, mask } => {
                    let eps = S::of(BCE_EPS);
                    let scale = g[0] / S::of(mask.len() as f64);
                    let gi = nodes[probs.0]
                        .value
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&p, &m)| {
                            if p < eps || p > S::one() - eps {
                                S::zero()
                            } else {
                                scale * ((S::one() - m) / (S::one() - p) - m / p)
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *probs, gi);
                }
            }
        }
        Ok(Grads { grads, shapes: nodes.into_iter().map(|n| n.value.shape()).collect(), params })
    }
}

const BCE_EPS: f64 = 1e-7;

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Shape>,
    params: BTreeMap<Var, String>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient with respect to a node; all zeros when the node does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients of every parameter bound with [`Tape::param`], by name.
    pub fn params(&self) -> Gradients<S> {
        self.params.iter().map(|(&v, name)| (name.clone(), self.wrt(v))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t([1, 1, 1, 1], &[5.0]));
        let k = tape.constant(t([1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);

        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        // Hand sum: the centre window sees all nine ones.
        assert_eq!(tape.value(y).at([0, 0, 1, 1]), 9.0);
        assert_eq!(tape.value(y).at([0, 0, 0, 0]), 4.0);

        let x = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let k = tape.constant(Tensor::zeros([1, 1, 3, 3]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.shape(y), [1, 1, 2, 2]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        let err = tape.conv2d(x, k, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn upsample_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let same = tape.upsample_nearest(x, 1).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let up = tape.upsample_nearest(x, 2).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(tape.value(up).data(), &want);
        let one = tape.constant(t([1, 1, 1, 1], &[3.0]));
        let up = tape.upsample_nearest(one, 2).unwrap();
        assert_eq!(tape.value(up).data(), &[3.0; 4]);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t([1, 1, 1, 3], &[-1.5, 0.0, 2.0]));
        let z = tape.constant(Tensor::zeros([1, 1, 1, 3]));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let sg = tape.sigmoid(x);
        assert_eq!(tape.value(sg).data()[1], 0.5);
        let other = tape.constant(Tensor::zeros([1, 1, 3, 1]));
        assert!(matches!(tape.add(x, other), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t([1, 2, 1, 1], &[0.0, 0.0]));
        let l = tape.softmax_cross_entropy(z, &[0], None).unwrap();
        assert!((tape.value(l.var).data()[0] - 2f64.ln()).abs() < 1e-12);

        let z = tape.constant(t([1, 2, 1, 1], &[10.0, -10.0]));
        let l = tape.softmax_cross_entropy(z, &[0], None).unwrap();
        assert!(tape.value(l.var).data()[0] < 1e-4);

        // Hand computation: sample 0 has uniform logits, sample 1 has
        // logits (1, 3) with label 1, so nll = ln(1 + e^-2).
        let z = tape.constant(t([2, 2, 1, 1], &[0.0, 0.0, 1.0, 3.0]));
        let l = tape.softmax_cross_entropy(z, &[0, 1], Some(&[0.7, 1.0])).unwrap();
        let want = (0.7 * 2f64.ln() + 1.0 * (1.0 + (-2f64).exp()).ln()) / 2.0;
        assert!((tape.value(l.var).data()[0] - want).abs() < 1e-12);

        let z = tape.constant(Tensor::zeros([0, 2, 1, 1]));
        let l = tape.softmax_cross_entropy(z, &[], None).unwrap();
        assert!(l.degenerate);
        assert_eq!(tape.value(l.var).data(), &[0.0]);
    }

    #[test]
    fn smooth_l1_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t([1, 1, 1, 1], &[0.5]));
        let l = tape.smooth_l1(p, &Tensor::zeros([1, 1, 1, 1]), None).unwrap();
        assert_eq!(tape.value(l.var).data(), &[0.125]);
        let p = tape.constant(t([1, 1, 1, 1], &[2.0]));
        let l = tape.smooth_l1(p, &Tensor::zeros([1, 1, 1, 1]), None).unwrap();
        assert_eq!(tape.value(l.var).data(), &[1.5]);
        let target = t([1, 4, 1, 1], &[0.1, -0.2, 0.3, 4.0]);
        let p = tape.constant(target.clone());
        let l = tape.smooth_l1(p, &target, None).unwrap();
        assert_eq!(tape.value(l.var).data(), &[0.0]);
        assert!(tape.smooth_l1(p, &Tensor::zeros([1, 2, 1, 1]), None).is_err());
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full([1, 1, 2, 2], 0.5));
        let l = tape.binary_cross_entropy(p, &t([1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert!((tape.value(l.var).data()[0] - 2f64.ln()).abs() < 1e-12);

        let mask = t([1, 1, 1, 2], &[1.0, 0.0]);
        let p = tape.constant(mask.clone());
        let l = tape.binary_cross_entropy(p, &mask).unwrap();
        assert!(tape.value(l.var).data()[0] <= 1e-6);

        // Hand computation: -(ln 0.8 + ln(1 - 0.3)) / 2.
        let p = tape.constant(t([1, 1, 1, 2], &[0.8, 0.3]));
        let l = tape.binary_cross_entropy(p, &mask).unwrap();
        let want = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((tape.value(l.var).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::from_fn([1, 2, 2, 2], |[_, c, y, x]| (c + y + x) as f64));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::zeros([1, 1, 2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_kernel_gradient_is_sum_of_uses() {
        let input = Tensor::from_fn([1, 1, 4, 4], |[_, _, y, x]| (y * 4 + x) as f64 * 0.1);
        let kern = Tensor::from_fn([1, 1, 3, 3], |[_, _, y, x]| (y as f64 - x as f64) * 0.2);

        let per_use = |uses: &[bool]| {
            let mut tape = Tape::<f64>::new();
            let k = tape.param("k", kern.clone());
            let k_frozen = tape.constant(kern.clone());
            let x = tape.constant(input.clone());
            let a = tape.conv2d(x, if uses[0] { k } else { k_frozen }, 1, 1).unwrap();
            let a = tape.relu(a);
            let b = tape.conv2d(a, if uses[1] { k } else { k_frozen }, 1, 1).unwrap();
            let s = tape.sum(b);
            tape.backward(s).unwrap().wrt(k)
        };
        let both = per_use(&[true, true]);
        let first = per_use(&[true, false]);
        let second = per_use(&[false, true]);
        for ((b, f), s) in both.data().iter().zip(first.data()).zip(second.data()) {
            assert!((b - (f + s)).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param("used", Tensor::full([1, 1, 1, 2], 2.0));
        let unused = tape.param("unused", Tensor::full([1, 1, 1, 2], 3.0));
        let s = tape.sum(used);
        let g = tape.backward(s).unwrap().params();
        assert!(g["unused"].data().iter().all(|&v| v == 0.0));
        let _ = unused;
    }
}
