//! Network building blocks.
//!
//! Each block owns only parameter *names*; values live in a
//! [`ParamStore`] and are bound onto a [`Graph`] during the forward pass.
//! Weights are initialised uniformly in `±1/√fan_in`, biases to zero.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
pub use crate::params::{Param, ParamInfo, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

fn uniform<T: Scalar, R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
}

/// Same-padded stride-1 convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            k,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let w = uniform(
            Shape::new(self.cout, self.cin, self.k, self.k),
            self.cin * self.k * self.k,
            rng,
        );
        store.insert(self.weight_name(), w, true)?;
        store.insert(self.bias_name(), Tensor::zeros(Shape::new(self.cout, 1, 1, 1)), true)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        g.conv2d(x, w, b)
    }
}

/// Squeeze-and-excitation style channel gate: global average pool, 1×1
/// reduction, ReLU, 1×1 expansion, sigmoid, per-channel scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention {
    down: Conv2d,
    up: Conv2d,
}

impl ChannelAttention {
    pub fn new(name: &str, channels: usize, reduction: usize) -> Self {
        let squeezed = (channels / reduction.max(1)).max(1);
        ChannelAttention {
            down: Conv2d::new(format!("{name}.down"), channels, squeezed, 1),
            up: Conv2d::new(format!("{name}.up"), squeezed, channels, 1),
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.down.init(store, rng)?;
        self.up.init(store, rng)
    }

    /// Returns the gated features.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gate = self.gate(g, store, x)?;
        g.scale_channels(x, gate)
    }

    /// The `(N, C, 1, 1)` channel weights alone.
    pub fn gate<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let squeezed = self.down.forward(g, store, pooled)?;
        let squeezed = g.relu(squeezed)?;
        let expanded = self.up.forward(g, store, squeezed)?;
        g.sigmoid(expanded)
    }
}

/// conv → ReLU → conv → channel gate, plus the block input.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    attention: ChannelAttention,
}

impl ResidualBlock {
    pub fn new(name: &str, channels: usize, reduction: usize) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(format!("{name}.conv1"), channels, channels, 3),
            conv2: Conv2d::new(format!("{name}.conv2"), channels, channels, 3),
            attention: ChannelAttention::new(&format!("{name}.ca"), channels, reduction),
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.conv1.init(store, rng)?;
        self.conv2.init(store, rng)?;
        self.attention.init(store, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = self.attention.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// `y = x + conv(blocks(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGroup {
    blocks: Vec<ResidualBlock>,
    tail: Conv2d,
}

impl ResidualGroup {
    pub fn new(name: &str, channels: usize, n_blocks: usize, reduction: usize) -> Self {
        ResidualGroup {
            blocks: (0..n_blocks)
                .map(|i| ResidualBlock::new(&format!("{name}.block{i}"), channels, reduction))
                .collect(),
            tail: Conv2d::new(format!("{name}.tail"), channels, channels, 3),
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.tail.init(store, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, store, h)?;
        }
        let h = self.tail.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Joint channel-spatial gate: a single 3×3×3 convolution over the
/// `(C, H, W)` volume produces attention logits `A`, and the output is
/// `sigmoid(A) ⊗ x + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpatialAttention {
    name: String,
}

impl ChannelSpatialAttention {
    pub fn new(name: impl Into<String>) -> Self {
        ChannelSpatialAttention { name: name.into() }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        store.insert(self.weight_name(), uniform(Shape::new(1, 3, 3, 3), 27, rng), true)?;
        store.insert(self.bias_name(), Tensor::zeros(Shape::new(1, 1, 1, 1)), true)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        let logits = g.conv3d(x, w, b)?;
        let gate = g.sigmoid(logits)?;
        let gated = g.mul(gate, x)?;
        g.add(gated, x)
    }
}

/// High-intensity priority map `A_H = σ(F_aux)` and its complement
/// `A_L = 1 − A_H`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPair<T: Scalar> {
    pub a_h: Tensor<T>,
    pub a_l: Tensor<T>,
}

impl<T: Scalar> AttentionPair<T> {
    /// Computes the pair directly from auxiliary features.
    pub fn from_aux(f_aux: &Tensor<T>) -> Self {
        let a_h = f_aux.map(crate::kernels::sigmoid);
        let a_l = a_h.map(|v| T::one() - v);
        AttentionPair { a_h, a_l }
    }

    /// Largest `|a_h + a_l − 1|`.
    pub fn max_complement_error(&self) -> T {
        self.a_h
            .data()
            .iter()
            .zip(self.a_l.data())
            .map(|(&h, &l)| (h + l - T::one()).abs())
            .fold(T::zero(), T::max)
    }

    /// Whether every `a_h` element lies strictly inside `(0, 1)`.
    pub fn is_open_unit(&self) -> bool {
        self.a_h.data().iter().all(|&v| v > T::zero() && v < T::one())
    }
}

/// Vars produced by one separable attention stage.
#[derive(Debug, Clone, Copy)]
pub struct SeparableOutput {
    pub out: Var,
    pub a_high: Var,
    pub a_low: Var,
}

/// Separable attention compensation.
///
/// `A_H = σ(F_aux)`, `A_L = 1 − A_H`, `F̂ = Conv_Re[F_aux, F_tar]` (1×1,
/// 2C→C), and the output is
/// `Q_R([Q(F̂ ⊗ A_H), Q(F̂ ⊗ A_L)]) + F_tar` where `Q` (shared by both
/// branches) and `Q_R` are 3×3 conv + ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableAttention {
    reduce: Conv2d,
    q: Conv2d,
    q_r: Conv2d,
    width: usize,
}

impl SeparableAttention {
    pub fn new(name: &str, width: usize) -> Self {
        SeparableAttention {
            reduce: Conv2d::new(format!("{name}.reduce"), 2 * width, width, 1),
            q: Conv2d::new(format!("{name}.q"), width, width, 3),
            q_r: Conv2d::new(format!("{name}.q_r"), 2 * width, width, 3),
            width,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.reduce.init(store, rng)?;
        self.q.init(store, rng)?;
        self.q_r.init(store, rng)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_aux: Var,
        f_tar: Var,
    ) -> Result<SeparableOutput> {
        let (sa, st) = (g.shape(f_aux), g.shape(f_tar));
        if sa != st {
            return Err(Error::shape(format!(
                "separable attention branches differ: aux {sa}, target {st}"
            )));
        }
        if st.c() != self.width {
            return Err(Error::shape(format!(
                "separable attention built for {} channels, got {}",
                self.width,
                st.c()
            )));
        }
        let a_high = g.sigmoid(f_aux)?;
        let a_low = g.one_minus(a_high)?;
        let joint = g.concat(&[f_aux, f_tar])?;
        let fused = self.reduce.forward(g, store, joint)?;
        let high = g.mul(fused, a_high)?;
        let high = self.q.forward(g, store, high)?;
        let high = g.relu(high)?;
        let low = g.mul(fused, a_low)?;
        let low = self.q.forward(g, store, low)?;
        let low = g.relu(low)?;
        let both = g.concat(&[high, low])?;
        let residual = self.q_r.forward(g, store, both)?;
        let residual = g.relu(residual)?;
        let out = g.add(residual, f_tar)?;
        Ok(SeparableOutput { out, a_high, a_low })
    }
}

/// Multi-stage integration: per batch item, the stage features are
/// flattened into the rows of `F̂`, `S = rowsoftmax(F̂F̂ᵀ)`, and the output
/// `S·F̂ + F̂` is returned with stage `k` in channels `[kC, (k+1)C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MultiStageIntegration;

impl MultiStageIntegration {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, stages: &[Var]) -> Result<Var> {
        g.stage_affinity(stages)
    }
}
