//! Finite-difference verification of reverse-mode gradients in 64-bit.
//!
//! The scalar loss is `Σ R ⊙ y` for a fixed random `R`, so transposed or
//! permuted gradients cannot cancel out. Coordinates whose central
//! difference straddles a ReLU kink are skipped.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::blocks::{
    ChannelAttention, ChannelSpatialAttention, Conv2d, MultiStageIntegration, ParamStore,
    ResidualGroup, SeparableAttention,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Coordinates probed per tensor; larger tensors are subsampled.
pub const MAX_COORDS: usize = 24;

/// Registered differentiable blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockId {
    Conv,
    PixelShuffle,
    ChannelAttention,
    ResidualGroup,
    MAtt,
    SeparableAttention,
    MInt,
    FullForward,
    /// A convolution whose analytic gradient is deliberately scaled; it
    /// must fail. Not part of [`BlockId::ALL`].
    NegativeControl,
}

impl BlockId {
    pub const ALL: [BlockId; 8] = [
        BlockId::Conv,
        BlockId::PixelShuffle,
        BlockId::ChannelAttention,
        BlockId::ResidualGroup,
        BlockId::MAtt,
        BlockId::SeparableAttention,
        BlockId::MInt,
        BlockId::FullForward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockId::Conv => "conv",
            BlockId::PixelShuffle => "pixel_shuffle",
            BlockId::ChannelAttention => "channel_attention",
            BlockId::ResidualGroup => "residual_group",
            BlockId::MAtt => "m_att",
            BlockId::SeparableAttention => "separable_attention",
            BlockId::MInt => "m_int",
            BlockId::FullForward => "full_forward",
            BlockId::NegativeControl => "negative_control",
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockId::ALL
            .into_iter()
            .chain([BlockId::NegativeControl])
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = BlockId::ALL.iter().map(|b| b.name()).collect();
                Error::config(format!("unknown block {s:?}; known: {}", known.join(", ")))
            })
    }
}

type ForwardFn = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>>;

/// A block instance with parameters and inputs to differentiate.
pub struct Fixture {
    pub store: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub forward: ForwardFn,
    /// Multiplies every analytic gradient; `1.0` except for the negative
    /// control.
    pub corrupt: f64,
}

fn random(shape: Shape, rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn conv_fixture(rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let conv = Conv2d::new("conv", 2, 3, 3);
    let mut store = ParamStore::new();
    conv.init(&mut store, rng)?;
    let b = random(Shape::new(3, 1, 1, 1), rng, 0.5);
    store.set_value(&conv.bias_name(), b)?;
    Ok(Fixture {
        store,
        inputs: vec![random(Shape::new(1, 2, 5, 5), rng, 1.0)],
        forward: Box::new(move |g, s, x| conv.forward(g, s, x[0])),
        corrupt: 1.0,
    })
}

/// Builds the fixture for `id` from `seed`.
pub fn fixture(id: BlockId, seed: u64) -> Result<Fixture> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let feat = Shape::new(1, 4, 6, 6);
    let f = match id {
        BlockId::Conv => conv_fixture(rng)?,
        BlockId::NegativeControl => Fixture {
            corrupt: 1.5,
            ..conv_fixture(rng)?
        },
        BlockId::PixelShuffle => Fixture {
            store,
            inputs: vec![random(Shape::new(1, 8, 3, 3), rng, 1.0)],
            forward: Box::new(|g, _, x| g.pixel_shuffle(x[0], 2)),
            corrupt: 1.0,
        },
        BlockId::ChannelAttention => {
            let ca = ChannelAttention::new("ca", 4, 2);
            ca.init(&mut store, rng)?;
            Fixture {
                store,
                inputs: vec![random(Shape::new(1, 4, 5, 5), rng, 1.0)],
                forward: Box::new(move |g, s, x| ca.forward(g, s, x[0])),
                corrupt: 1.0,
            }
        }
        BlockId::ResidualGroup => {
            let group = ResidualGroup::new("group", 4, 2, 2);
            group.init(&mut store, rng)?;
            Fixture {
                store,
                inputs: vec![random(feat, rng, 1.0)],
                forward: Box::new(move |g, s, x| group.forward(g, s, x[0])),
                corrupt: 1.0,
            }
        }
        BlockId::MAtt => {
            let att = ChannelSpatialAttention::new("att");
            att.init(&mut store, rng)?;
            Fixture {
                store,
                inputs: vec![random(feat, rng, 1.0)],
                forward: Box::new(move |g, s, x| att.forward(g, s, x[0])),
                corrupt: 1.0,
            }
        }
        BlockId::SeparableAttention => {
            let sep = SeparableAttention::new("sep", 4);
            sep.init(&mut store, rng)?;
            Fixture {
                store,
                inputs: vec![random(feat, rng, 1.0), random(feat, rng, 1.0)],
                forward: Box::new(move |g, s, x| Ok(sep.forward(g, s, x[0], x[1])?.out)),
                corrupt: 1.0,
            }
        }
        BlockId::MInt => Fixture {
            store,
            inputs: (0..4).map(|_| random(Shape::new(1, 2, 3, 3), rng, 0.5)).collect(),
            forward: Box::new(|g, _, x| MultiStageIntegration.forward(g, x)),
            corrupt: 1.0,
        },
        BlockId::FullForward => {
            let cfg = ModelConfig {
                groups: 2,
                width: 8,
                ..ModelConfig::desk()
            };
            let net = Network::new(&cfg)?;
            let store = net.init(seed)?;
            let x_aux = Tensor::from_fn(Shape::new(1, 1, 16, 16), |_| rng.gen_range(0.0..1.0));
            let y_tar = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_| rng.gen_range(0.0..1.0));
            Fixture {
                store,
                inputs: Vec::new(),
                forward: Box::new(move |g, s, _| {
                    let out = net.forward(g, s, &x_aux, &y_tar)?;
                    let aux = out.sr_aux.ok_or_else(|| Error::config("full model lacks aux output"))?;
                    let both = g.concat(&[out.sr_tar, aux])?;
                    Ok(both)
                }),
                corrupt: 1.0,
            }
        }
    };
    Ok(f)
}

/// Outcome for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub block: BlockId,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

struct Evaluated {
    loss: f64,
    signature: u64,
}

fn evaluate(f: &Fixture, store: &ParamStore<f64>, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<Evaluated> {
    let mut g = Graph::new().with_finite_checks(true);
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let y = (f.forward)(&mut g, store, &vars)?;
    let loss = g.dot(y, weights)?;
    Ok(Evaluated {
        loss: g.scalar(loss),
        signature: g.relu_signature(),
    })
}

fn pick(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        let mut idx = sample(rng, len, MAX_COORDS).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Compares analytic and central-difference gradients for every input
/// and trainable parameter of `f`.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, δ)`
/// where `δ = 1e-3 · max |n|` over all probed coordinates, so entries that
/// are tiny relative to the block's gradient scale are judged absolutely.
pub fn check_fixture(id: BlockId, f: &Fixture, step: f64, tolerance: f64, seed: u64) -> Result<GradReport> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);

    let mut g = Graph::new().with_finite_checks(true);
    let vars = f.inputs.iter().map(|t| g.variable(t.clone())).collect::<Result<Vec<_>>>()?;
    let y = (f.forward)(&mut g, &f.store, &vars)?;
    let weights = random(g.shape(y), rng, 1.0);
    let loss = g.dot(y, &weights)?;
    let base_sig = g.relu_signature();
    let grads = g.backward(loss)?;
    let mut store = f.store.clone();
    store.zero_grads();
    grads.accumulate_into(&mut store)?;

    // (analytic, numeric) pairs
    let mut pairs = Vec::new();
    let mut skipped = 0;
    let probe = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| evaluate(f, store, inputs, &weights);

    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(f.inputs[k].shape()));
        for i in pick(f.inputs[k].len(), rng) {
            let mut inputs = f.inputs.clone();
            let x0 = inputs[k].data()[i];
            inputs[k].data_mut()[i] = x0 + step;
            let plus = probe(&f.store, &inputs)?;
            inputs[k].data_mut()[i] = x0 - step;
            let minus = probe(&f.store, &inputs)?;
            if plus.signature != base_sig || minus.signature != base_sig {
                skipped += 1;
                continue;
            }
            pairs.push((analytic.data()[i] * f.corrupt, (plus.loss - minus.loss) / (2.0 * step)));
        }
    }

    let names: Vec<String> = store.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.to_string()).collect();
    for name in names {
        let analytic = store.get(&name)?.grad.clone();
        for i in pick(analytic.len(), rng) {
            let mut perturbed = f.store.clone();
            let p = perturbed.get_mut(&name)?;
            let w0 = p.value.data()[i];
            p.value.data_mut()[i] = w0 + step;
            let plus = probe(&perturbed, &f.inputs)?;
            perturbed.get_mut(&name)?.value.data_mut()[i] = w0 - step;
            let minus = probe(&perturbed, &f.inputs)?;
            if plus.signature != base_sig || minus.signature != base_sig {
                skipped += 1;
                continue;
            }
            pairs.push((analytic.data()[i] * f.corrupt, (plus.loss - minus.loss) / (2.0 * step)));
        }
    }

    let scale = pairs.iter().map(|(_, n)| n.abs()).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let max_rel_error = pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    let passed = !pairs.is_empty() && max_rel_error < tolerance;
    Ok(GradReport {
        block: id,
        max_rel_error,
        checked: pairs.len(),
        skipped_kinks: skipped,
        tolerance,
        passed,
    })
}

/// Runs the registered fixture for `id`.
pub fn grad_check(id: BlockId, tolerance: f64) -> Result<GradReport> {
    let seed = 2024;
    let f = fixture(id, seed)?;
    check_fixture(id, &f, DEFAULT_STEP, tolerance, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for b in BlockId::ALL.into_iter().chain([BlockId::NegativeControl]) {
            assert_eq!(b.name().parse::<BlockId>().unwrap(), b);
        }
        assert!("nope".parse::<BlockId>().is_err());
        assert!(!BlockId::ALL.contains(&BlockId::NegativeControl));
    }

    #[test]
    fn linear_conv_is_exact() {
        let r = grad_check(BlockId::Conv, DEFAULT_TOLERANCE).unwrap();
        assert!(r.passed && r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn negative_control_fails() {
        let r = grad_check(BlockId::NegativeControl, DEFAULT_TOLERANCE).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn attention_blocks_pass() {
        for id in [BlockId::SeparableAttention, BlockId::MInt, BlockId::MAtt, BlockId::PixelShuffle] {
            let r = grad_check(id, DEFAULT_TOLERANCE).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}
