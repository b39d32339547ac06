//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns a gradient for every node that depends on a differentiable leaf.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    Conv3d { x: Var, w: Var, b: Var },
    PixelShuffle { x: Var, s: usize },
    Add(Var, Var),
    Mul(Var, Var),
    ScaleChannels { x: Var, gate: Var },
    Sigmoid(Var),
    Relu(Var),
    OneMinus(Var),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    StageAffinity { stages: Vec<Var>, affinity: Vec<T> },
    MeanAbsError { x: Var, target: Tensor<T> },
    MeanSquaredError { x: Var, target: Tensor<T> },
    WeightedSum(Vec<(Var, T)>),
    Dot { x: Var, weights: Tensor<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// New tape. Non-finite values are rejected after every operation in
    /// builds with debug assertions.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite value produced by {} (node {})",
                op_name(&op),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter, reusing the node if already bound.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let [cout, cin, kh, kw] = ws.0;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!("conv kernel {ws} must be square and odd")));
        }
        if cin != xs.c() {
            return Err(Error::shape(format!(
                "conv expects {cin} input channels, got {}",
                xs.c()
            )));
        }
        if self.shape(b) != Shape::new(cout, 1, 1, 1) {
            return Err(Error::shape(format!(
                "conv bias shape {} does not match {cout} outputs",
                self.shape(b)
            )));
        }
        let y = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b));
        let needs = self.needs(&[x, w, b]);
        self.push(y, Op::Conv2d { x, w, b }, needs)
    }

    /// Single-channel 3×3×3 convolution over each item's (C, H, W) volume.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.shape(w) != Shape::new(1, 3, 3, 3) || self.shape(b) != Shape::new(1, 1, 1, 1) {
            return Err(Error::shape(format!(
                "3-D attention kernel must be (1, 3, 3, 3) with scalar bias, got {} / {}",
                self.shape(w),
                self.shape(b)
            )));
        }
        let bias = self.scalar(b);
        let y = kernels::conv3d_forward(self.value(x), self.value(w), bias);
        let needs = self.needs(&[x, w, b]);
        self.push(y, Op::Conv3d { x, w, b }, needs)
    }

    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let c = self.shape(x).c();
        if s == 0 || c % (s * s) != 0 {
            return Err(Error::shape(format!(
                "{c} channels not divisible by scale² = {}",
                s * s
            )));
        }
        let y = kernels::pixel_shuffle_forward(self.value(x), s);
        let needs = self.needs(&[x]);
        self.push(y, Op::PixelShuffle { x, s }, needs)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {} and {} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let needs = self.needs(&[a, b]);
        self.push(y, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let needs = self.needs(&[a, b]);
        self.push(y, Op::Mul(a, b), needs)
    }

    /// `x[n, c, :, :] * gate[n, c, 0, 0]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x);
        if self.shape(gate) != Shape::new(xs.n(), xs.c(), 1, 1) {
            return Err(Error::shape(format!(
                "channel gate {} does not match {xs}",
                self.shape(gate)
            )));
        }
        let plane = xs.plane();
        let g = self.value(gate).data();
        let mut y = self.value(x).clone();
        for (chunk, &s) in y.data_mut().chunks_exact_mut(plane).zip(g) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let needs = self.needs(&[x, gate]);
        self.push(y, Op::ScaleChannels { x, gate }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(kernels::sigmoid);
        let needs = self.needs(&[x]);
        self.push(y, Op::Sigmoid(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(&[x]);
        self.push(y, Op::Relu(x), needs)
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| T::one() - v);
        let needs = self.needs(&[x]);
        self.push(y, Op::OneMinus(x), needs)
    }

    /// Concatenation along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let s0 = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n(), s.h(), s.w()) != (s0.n(), s0.h(), s0.w()) {
                return Err(Error::shape(format!("concat: {s} incompatible with {s0}")));
            }
            channels += s.c();
        }
        let out_shape = Shape::new(s0.n(), channels, s0.h(), s0.w());
        let mut data = Vec::with_capacity(out_shape.numel());
        for i in 0..s0.n() {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape().item();
                data.extend_from_slice(&t.data()[i * len..(i + 1) * len]);
            }
        }
        let y = Tensor::from_vec(out_shape, data)?;
        let needs = self.needs(parts);
        self.push(y, Op::Concat(parts.to_vec()), needs)
    }

    /// Spatial mean per channel, `(N, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let plane = xs.plane();
        let inv = T::one() / T::from_usize(plane).expect("plane size");
        let data = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let y = Tensor::from_vec(Shape::new(xs.n(), xs.c(), 1, 1), data)?;
        let needs = self.needs(&[x]);
        self.push(y, Op::GlobalAvgPool(x), needs)
    }

    /// Multi-stage affinity integration over equally shaped stage features.
    /// Returns the `(N, K·C, H, W)` output; the row-stochastic affinities are
    /// available through [`Graph::affinity`].
    pub fn stage_affinity(&mut self, stages: &[Var]) -> Result<Var> {
        if stages.len() < 2 {
            return Err(Error::config(format!(
                "stage integration needs at least 2 stages, got {}",
                stages.len()
            )));
        }
        let s0 = self.shape(stages[0]);
        if let Some(&bad) = stages.iter().find(|&&v| self.shape(v) != s0) {
            return Err(Error::shape(format!(
                "stage shapes differ: {} vs {s0}",
                self.shape(bad)
            )));
        }
        let values: Vec<&Tensor<T>> = stages.iter().map(|&v| self.value(v)).collect();
        let (y, affinity) = kernels::stage_affinity_forward(&values);
        let needs = self.needs(stages);
        self.push(
            y,
            Op::StageAffinity {
                stages: stages.to_vec(),
                affinity,
            },
            needs,
        )
    }

    /// Row-stochastic affinity `N × K × K` of a stage-affinity node.
    pub fn affinity(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::StageAffinity { affinity, .. } => Some(affinity),
            _ => None,
        }
    }

    /// Mean absolute error against a constant target, as a scalar node.
    pub fn mean_abs_error(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        self.value(x).expect_shape(target.shape())?;
        let n = T::from_usize(target.len()).expect("size");
        let v = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<T>()
            / n;
        let needs = self.needs(&[x]);
        self.push(
            Tensor::full(Shape::new(1, 1, 1, 1), v),
            Op::MeanAbsError {
                x,
                target: target.clone(),
            },
            needs,
        )
    }

    /// Mean squared error against a constant target, as a scalar node.
    pub fn mean_squared_error(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        self.value(x).expect_shape(target.shape())?;
        let n = T::from_usize(target.len()).expect("size");
        let v = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        let needs = self.needs(&[x]);
        self.push(
            Tensor::full(Shape::new(1, 1, 1, 1), v),
            Op::MeanSquaredError {
                x,
                target: target.clone(),
            },
            needs,
        )
    }

    /// `Σ wᵢ·xᵢ` over equally shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::shape("weighted sum of nothing"))?;
        let mut acc = Tensor::zeros(self.shape(first));
        for &(v, wt) in terms {
            let t = self.value(v);
            t.expect_shape(acc.shape())?;
            for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += wt * b;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = self.needs(&vars);
        self.push(acc, Op::WeightedSum(terms.to_vec()), needs)
    }

    /// `Σ x ⊙ weights` as a scalar node.
    pub fn dot(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        self.value(x).expect_shape(weights.shape())?;
        let v = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        let needs = self.needs(&[x]);
        self.push(
            Tensor::full(Shape::new(1, 1, 1, 1), v),
            Op::Dot {
                x,
                weights: weights.clone(),
            },
            needs,
        )
    }

    /// Hash of the activation pattern of every ReLU on the tape. Two
    /// evaluations with equal signatures lie on the same linear piece.
    pub fn relu_signature(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.nodes[x.0].value.data() {
                    (v > T::zero()).hash(&mut hasher);
                }
            }
        }
        hasher.finish()
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        if !node.needs_grad {
            return Ok(());
        }
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut dx = want(*x).then(|| Tensor::zeros(xv.shape()));
                let mut dw = want(*w).then(|| Tensor::zeros(wv.shape()));
                let mut db = want(*b).then(|| Tensor::zeros(self.shape(*b)));
                kernels::conv2d_backward(xv, wv, g, dx.as_mut(), dw.as_mut(), db.as_mut());
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(d) = d {
                        self.accumulate(grads, v, d)?;
                    }
                }
            }
            Op::Conv3d { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut dx = want(*x).then(|| Tensor::zeros(xv.shape()));
                let mut dw = want(*w).then(|| Tensor::zeros(wv.shape()));
                let mut db = want(*b).then(|| Tensor::zeros(self.shape(*b)));
                kernels::conv3d_backward(xv, wv, g, dx.as_mut(), dw.as_mut(), db.as_mut());
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(d) = d {
                        self.accumulate(grads, v, d)?;
                    }
                }
            }
            Op::PixelShuffle { x, s } => {
                self.accumulate(grads, *x, kernels::pixel_unshuffle(g, *s))?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |p, q| p * q)?)?;
                }
                if want(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |p, q| p * q)?)?;
                }
            }
            Op::ScaleChannels { x, gate } => {
                let plane = self.shape(*x).plane();
                let gv = self.value(*gate);
                if want(*x) {
                    let mut dx = g.clone();
                    for (chunk, &s) in dx.data_mut().chunks_exact_mut(plane).zip(gv.data()) {
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *x, dx)?;
                }
                if want(*gate) {
                    let data = g
                        .data()
                        .chunks_exact(plane)
                        .zip(self.value(*x).data().chunks_exact(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>())
                        .collect();
                    self.accumulate(grads, *gate, Tensor::from_vec(gv.shape(), data)?)?;
                }
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::OneMinus(x) => {
                self.accumulate(grads, *x, g.map(|v| -v))?;
            }
            Op::Concat(parts) => {
                let n = g.shape().n();
                let mut offset = 0;
                let item = g.shape().item();
                for &p in parts {
                    let ps = self.shape(p);
                    let len = ps.item();
                    if want(p) {
                        let mut data = Vec::with_capacity(ps.numel());
                        for i in 0..n {
                            data.extend_from_slice(&g.data()[i * item + offset..i * item + offset + len]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(ps, data)?)?;
                    }
                    offset += len;
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                let inv = T::one() / T::from_usize(plane).expect("plane size");
                let mut d = Tensor::zeros(xs);
                for (chunk, &gv) in d.data_mut().chunks_exact_mut(plane).zip(g.data()) {
                    chunk.fill(gv * inv);
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::StageAffinity { stages, affinity } => {
                let values: Vec<&Tensor<T>> = stages.iter().map(|&v| self.value(v)).collect();
                let ds = kernels::stage_affinity_backward(&values, affinity, g);
                for (&v, d) in stages.iter().zip(ds) {
                    self.accumulate(grads, v, d)?;
                }
            }
            Op::MeanAbsError { x, target } => {
                let scale = g.data()[0] / T::from_usize(target.len()).expect("size");
                let d = self.value(*x).zip_map(target, |a, b| {
                    let diff = a - b;
                    if diff > T::zero() {
                        scale
                    } else if diff < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::MeanSquaredError { x, target } => {
                let scale = g.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(target.len()).expect("size");
                let d = self.value(*x).zip_map(target, |a, b| (a - b) * scale)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::WeightedSum(terms) => {
                for &(v, wt) in terms {
                    if want(v) {
                        self.accumulate(grads, v, g.map(|x| x * wt))?;
                    }
                }
            }
            Op::Dot { x, weights } => {
                let s = g.data()[0];
                self.accumulate(grads, *x, weights.map(|w| w * s))?;
            }
        }
        Ok(())
    }
}

fn op_name<T: Scalar>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Conv3d { .. } => "conv3d",
        Op::PixelShuffle { .. } => "pixel_shuffle",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::ScaleChannels { .. } => "scale_channels",
        Op::Sigmoid(_) => "sigmoid",
        Op::Relu(_) => "relu",
        Op::OneMinus(_) => "one_minus",
        Op::Concat(_) => "concat",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::StageAffinity { .. } => "stage_affinity",
        Op::MeanAbsError { .. } => "mean_abs_error",
        Op::MeanSquaredError { .. } => "mean_squared_error",
        Op::WeightedSum(_) => "weighted_sum",
        Op::Dot { .. } => "dot",
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, &v) in &self.params {
            if let Some(g) = self.get(v) {
                let p = store.get_mut(name)?;
                if p.trainable {
                    p.grad.add_assign(g)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn product_rule_and_fan_out() {
        // loss = sum(a * a + a) -> d/da = 2a + 1
        let mut g = Graph::<f64>::new();
        let s = Shape::new(1, 1, 1, 3);
        let a = g.variable(t(s, &[1.0, -2.0, 0.5])).unwrap();
        let sq = g.mul(a, a).unwrap();
        let y = g.add(sq, a).unwrap();
        let loss = g.dot(y, &Tensor::full(s, 1.0)).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let s = Shape::new(1, 1, 1, 2);
        let c = g.input(t(s, &[1.0, 2.0])).unwrap();
        let v = g.variable(t(s, &[3.0, 4.0])).unwrap();
        let y = g.mul(c, v).unwrap();
        let loss = g.dot(y, &Tensor::full(s, 1.0)).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let v = g.variable(Tensor::zeros(Shape::new(1, 1, 2, 2))).unwrap();
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn non_finite_values_rejected_when_checking() {
        let mut g = Graph::<f64>::new().with_finite_checks(true);
        assert!(matches!(
            g.input(Tensor::full(Shape::new(1, 1, 1, 1), f64::NAN)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn param_binding_is_shared_and_accumulates() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full(Shape::new(1, 1, 1, 1), 2.0), true).unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&store, "w").unwrap();
        let w2 = g.param(&store, "w").unwrap();
        assert_eq!(w1, w2);
        let y = g.mul(w1, w2).unwrap();
        let loss = g.dot(y, &Tensor::full(Shape::new(1, 1, 1, 1), 1.0)).unwrap();
        g.backward(loss).unwrap().accumulate_into(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad.data(), &[4.0]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(Shape::new(1, 2, 3, 3))).unwrap();
        let b = g.input(Tensor::zeros(Shape::new(1, 3, 3, 3))).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let w = g.input(Tensor::zeros(Shape::new(4, 3, 3, 3))).unwrap();
        let bias = g.input(Tensor::zeros(Shape::new(4, 1, 1, 1))).unwrap();
        assert!(matches!(g.conv2d(a, w, bias), Err(Error::Shape(_))));
        assert!(matches!(g.pixel_shuffle(b, 2), Err(Error::Shape(_))));
        assert!(matches!(g.stage_affinity(&[a]), Err(Error::Config(_))));
    }

    #[test]
    fn mae_and_mse_values() {
        let mut g = Graph::<f64>::new();
        let s = Shape::new(1, 1, 1, 4);
        let x = g.variable(t(s, &[0.0, 1.0, 2.0, 3.0])).unwrap();
        let target = Tensor::zeros(s);
        let mae = g.mean_abs_error(x, &target).unwrap();
        let mse = g.mean_squared_error(x, &target).unwrap();
        assert_eq!(g.scalar(mae), 1.5);
        assert_eq!(g.scalar(mse), 3.5);
        let grads = g.backward(mae).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.25, 0.25, 0.25]);
    }
}
