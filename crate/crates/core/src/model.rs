//! Two-branch super-resolution network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::blocks::{
    AttentionPair, ChannelSpatialAttention, Conv2d, MultiStageIntegration, ParamStore,
    ResidualGroup, SeparableAttention,
};
use crate::error::{Error, Result};
use crate::fourier::ScaleFactor;
use crate::tensor::{Scalar, Shape, Tensor};

fn default_reduction() -> usize {
    4
}

/// Architecture hyperparameters and component switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: ScaleFactor,
    /// Residual groups per branch.
    pub groups: usize,
    /// Base feature width.
    pub width: usize,
    /// Residual blocks per group.
    pub blocks: usize,
    pub use_aux: bool,
    pub use_sep_attention: bool,
    pub use_m_int: bool,
    pub use_m_att: bool,
    /// Channel-attention squeeze ratio inside residual blocks.
    #[serde(default = "default_reduction")]
    pub ca_reduction: usize,
}

/// Named rows of the ablation lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Ab1,
    Ab2,
    Ab3,
    Ab4,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Ab1, Variant::Ab2, Variant::Ab3, Variant::Ab4, Variant::Full];

    /// `(use_aux, use_m_int, use_m_att, use_sep_attention)`.
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Variant::Ab1 => (false, false, false, false),
            Variant::Ab2 => (false, false, true, false),
            Variant::Ab3 => (true, false, true, false),
            Variant::Ab4 => (true, true, true, false),
            Variant::Full => (true, true, true, true),
        }
    }

    /// Copies `base` with this variant's switches.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (use_aux, use_m_int, use_m_att, use_sep_attention) = self.flags();
        ModelConfig {
            use_aux,
            use_m_int,
            use_m_att,
            use_sep_attention,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ab1 => "Ab1",
            Variant::Ab2 => "Ab2",
            Variant::Ab3 => "Ab3",
            Variant::Ab4 => "Ab4",
            Variant::Full => "full",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}; expected Ab1, Ab2, Ab3, Ab4 or full")))
    }
}

/// Reference-scale configuration for `name` (six groups, width 32, 2× scale).
pub fn ablation_config(name: &str) -> Result<ModelConfig> {
    Ok(name.parse::<Variant>()?.apply(&ModelConfig::reference()))
}

impl ModelConfig {
    /// Full model at reference scale.
    pub fn reference() -> Self {
        ModelConfig {
            scale: ScaleFactor::new(2).expect("2 is a valid scale"),
            groups: 6,
            width: 32,
            blocks: 2,
            use_aux: true,
            use_sep_attention: true,
            use_m_int: true,
            use_m_att: true,
            ca_reduction: default_reduction(),
        }
    }

    /// Full model at desk scale (two groups, width 16).
    pub fn desk() -> Self {
        ModelConfig {
            groups: 2,
            width: 16,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups < 1 {
            return Err(Error::config("groups must be at least 1"));
        }
        if self.width < 4 {
            return Err(Error::config(format!("width must be at least 4, got {}", self.width)));
        }
        if self.ca_reduction < 1 {
            return Err(Error::config("ca_reduction must be at least 1"));
        }
        if self.use_sep_attention && !self.use_aux {
            return Err(Error::config("use_sep_attention requires use_aux"));
        }
        if self.use_m_int && self.stage_count() < 2 {
            return Err(Error::config(
                "use_m_int needs at least two stages; enable use_aux or use more groups",
            ));
        }
        Ok(())
    }

    /// Number of stage features fed to multi-stage integration.
    pub fn stage_count(&self) -> usize {
        if self.use_aux {
            2 * self.groups
        } else {
            self.groups
        }
    }
}

/// Per-stage maps recorded when diagnostics are requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics<T: Scalar> {
    /// One pair per stage with separable attention.
    pub attention: Vec<AttentionPair<T>>,
    /// Row-major `N × K × K` stage affinities.
    pub affinity: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T: Scalar> {
    pub sr_tar: Tensor<T>,
    pub sr_aux: Option<Tensor<T>>,
    pub diagnostics: Option<Diagnostics<T>>,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub sr_tar: Var,
    pub sr_aux: Option<Var>,
    pub attention: Vec<(Var, Var)>,
    pub integration: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: ModelConfig,
    head_aux: Option<Conv2d>,
    head_tar: Conv2d,
    aux_groups: Vec<ResidualGroup>,
    tar_groups: Vec<ResidualGroup>,
    separable: Vec<SeparableAttention>,
    att_aux: Option<ChannelSpatialAttention>,
    att_tar: Option<ChannelSpatialAttention>,
    project: Option<Conv2d>,
    tail_aux: Option<Conv2d>,
    tail_tar: Conv2d,
}

impl Network {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let s = cfg.scale.get();
        let groups = |branch: &str| {
            (0..cfg.groups)
                .map(|l| ResidualGroup::new(&format!("{branch}.group{l}"), c, cfg.blocks, cfg.ca_reduction))
                .collect::<Vec<_>>()
        };
        Ok(Network {
            cfg: cfg.clone(),
            head_aux: cfg.use_aux.then(|| Conv2d::new("aux.head", 1, c, 3)),
            head_tar: Conv2d::new("tar.head", 1, c * s * s, 3),
            aux_groups: if cfg.use_aux { groups("aux") } else { Vec::new() },
            tar_groups: groups("tar"),
            separable: if cfg.use_sep_attention {
                (0..cfg.groups)
                    .map(|l| SeparableAttention::new(&format!("sep{l}"), c))
                    .collect()
            } else {
                Vec::new()
            },
            att_aux: (cfg.use_aux && cfg.use_m_att).then(|| ChannelSpatialAttention::new("aux.att")),
            att_tar: cfg.use_m_att.then(|| ChannelSpatialAttention::new("tar.att")),
            project: cfg
                .use_m_int
                .then(|| Conv2d::new("int.project", cfg.stage_count() * c, c, 1)),
            tail_aux: cfg.use_aux.then(|| Conv2d::new("aux.tail", c, 1, 3)),
            tail_tar: Conv2d::new("tar.tail", c, 1, 3),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if let Some(h) = &self.head_aux {
            h.init(&mut store, &mut rng)?;
        }
        self.head_tar.init(&mut store, &mut rng)?;
        for g in self.aux_groups.iter().chain(&self.tar_groups) {
            g.init(&mut store, &mut rng)?;
        }
        for s in &self.separable {
            s.init(&mut store, &mut rng)?;
        }
        for a in self.att_aux.iter().chain(&self.att_tar) {
            a.init(&mut store, &mut rng)?;
        }
        if let Some(p) = &self.project {
            p.init(&mut store, &mut rng)?;
        }
        if let Some(t) = &self.tail_aux {
            t.init(&mut store, &mut rng)?;
        }
        self.tail_tar.init(&mut store, &mut rng)?;
        Ok(store)
    }

    fn check_inputs<T: Scalar>(&self, x_aux: &Tensor<T>, y_tar: &Tensor<T>) -> Result<()> {
        let s = self.cfg.scale.get();
        let ys = y_tar.shape();
        if ys.c() != 1 {
            return Err(Error::shape(format!("target input must have one channel, got {ys}")));
        }
        if self.cfg.use_aux {
            let want = Shape::new(ys.n(), 1, ys.h() * s, ys.w() * s);
            if x_aux.shape() != want {
                return Err(Error::shape(format!(
                    "auxiliary input {} does not match upsampled target {want}",
                    x_aux.shape()
                )));
            }
        }
        Ok(())
    }

    /// Initial features `(F_aux⁰, F_tar⁰)`; the auxiliary one is `None`
    /// when the branch is disabled.
    pub fn extract_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_aux: &Tensor<T>,
        y_tar: &Tensor<T>,
    ) -> Result<(Option<Var>, Var)> {
        self.check_inputs(x_aux, y_tar)?;
        let f_aux = match &self.head_aux {
            Some(head) => {
                let x = g.input(x_aux.clone())?;
                Some(head.forward(g, store, x)?)
            }
            None => None,
        };
        let y = g.input(y_tar.clone())?;
        let f_tar = self.head_tar.forward(g, store, y)?;
        let f_tar = g.pixel_shuffle(f_tar, self.cfg.scale.get())?;
        Ok((f_aux, f_tar))
    }

    /// Builds the forward pass on `g`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_aux: &Tensor<T>,
        y_tar: &Tensor<T>,
    ) -> Result<ForwardVars> {
        let (mut f_aux, f_tar0) = self.extract_features(g, store, x_aux, y_tar)?;
        let mut f_tar = f_tar0;
        let mut stages = Vec::with_capacity(self.cfg.stage_count());
        let mut attention = Vec::new();
        for l in 0..self.cfg.groups {
            let fused = match f_aux.as_mut() {
                Some(fa) => {
                    *fa = self.aux_groups[l].forward(g, store, *fa)?;
                    stages.push(*fa);
                    match self.separable.get(l) {
                        Some(sep) => {
                            let out = sep.forward(g, store, *fa, f_tar)?;
                            attention.push((out.a_high, out.a_low));
                            out.out
                        }
                        None => g.add(*fa, f_tar)?,
                    }
                }
                None => f_tar,
            };
            f_tar = self.tar_groups[l].forward(g, store, fused)?;
            stages.push(f_tar);
        }

        let integration = if self.project.is_some() {
            Some(MultiStageIntegration.forward(g, &stages)?)
        } else {
            None
        };
        let g_tar = match &self.att_tar {
            Some(att) => att.forward(g, store, f_tar)?,
            None => f_tar,
        };
        let mut sum = g.add(f_tar0, g_tar)?;
        if let (Some(h), Some(project)) = (integration, &self.project) {
            let h = project.forward(g, store, h)?;
            sum = g.add(sum, h)?;
        }
        let sr_tar = self.tail_tar.forward(g, store, sum)?;

        let sr_aux = match (f_aux, &self.tail_aux) {
            (Some(fa), Some(tail)) => {
                let g_aux = match &self.att_aux {
                    Some(att) => att.forward(g, store, fa)?,
                    None => fa,
                };
                Some(tail.forward(g, store, g_aux)?)
            }
            _ => None,
        };
        Ok(ForwardVars {
            sr_tar,
            sr_aux,
            attention,
            integration,
        })
    }

    /// Runs a forward pass and returns the reconstructions, optionally
    /// with per-stage attention maps and affinities.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x_aux: &Tensor<T>,
        y_tar: &Tensor<T>,
        diagnostics: bool,
    ) -> Result<ForwardOutput<T>> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, store, x_aux, y_tar)?;
        let diagnostics = diagnostics.then(|| Diagnostics {
            attention: vars
                .attention
                .iter()
                .map(|&(h, l)| AttentionPair {
                    a_h: g.value(h).clone(),
                    a_l: g.value(l).clone(),
                })
                .collect(),
            affinity: vars.integration.and_then(|v| g.affinity(v)).map(<[T]>::to_vec),
        });
        Ok(ForwardOutput {
            sr_tar: g.value(vars.sr_tar).clone(),
            sr_aux: vars.sr_aux.map(|v| g.value(v).clone()),
            diagnostics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(variant: Variant) -> ModelConfig {
        variant.apply(&ModelConfig {
            groups: 2,
            width: 4,
            blocks: 1,
            ..ModelConfig::desk()
        })
    }

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(0.0..1.0))
    }

    #[test]
    fn ablation_rows_match_table() {
        let ab2 = ablation_config("Ab2").unwrap();
        assert!(!ab2.use_aux && !ab2.use_m_int && ab2.use_m_att && !ab2.use_sep_attention);
        let ab4 = ablation_config("Ab4").unwrap();
        assert!(ab4.use_aux && ab4.use_m_int && ab4.use_m_att && !ab4.use_sep_attention);
        let full = ablation_config("full").unwrap();
        assert!(full.use_aux && full.use_m_int && full.use_m_att && full.use_sep_attention);
        let ab1 = ablation_config("Ab1").unwrap();
        assert!(!ab1.use_aux && !ab1.use_m_int && !ab1.use_m_att && !ab1.use_sep_attention);
        let ab3 = ablation_config("Ab3").unwrap();
        assert!(ab3.use_aux && !ab3.use_m_int && ab3.use_m_att && !ab3.use_sep_attention);
        assert!(ablation_config("Ab5").is_err());
        assert_eq!(full.groups, 6);
        for v in Variant::ALL {
            v.apply(&ModelConfig::desk()).validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.use_aux = false;
        assert!(matches!(Network::new(&cfg), Err(Error::Config(_))));
        let mut cfg = ModelConfig::desk();
        cfg.width = 3;
        assert!(Network::new(&cfg).is_err());
        let mut cfg = ModelConfig::desk();
        cfg.groups = 0;
        assert!(Network::new(&cfg).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ModelConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<ModelConfig>(&text.replace("\"groups\"", "\"layers\"")).is_err());
    }

    #[test]
    fn output_shapes_for_every_variant() {
        for v in Variant::ALL {
            let cfg = small(v);
            let net = Network::new(&cfg).unwrap();
            let store = net.init::<f64>(1).unwrap();
            let out = net
                .infer(&store, &random(Shape::new(2, 1, 32, 32), 2), &random(Shape::new(2, 1, 16, 16), 3), true)
                .unwrap();
            assert_eq!(out.sr_tar.shape(), Shape::new(2, 1, 32, 32), "{v}");
            assert_eq!(out.sr_aux.is_some(), cfg.use_aux, "{v}");
            let diag = out.diagnostics.unwrap();
            assert_eq!(diag.attention.len(), if cfg.use_sep_attention { 2 } else { 0 });
            assert_eq!(diag.affinity.is_some(), cfg.use_m_int);
            for pair in &diag.attention {
                assert_eq!(pair.max_complement_error(), 0.0);
            }
        }
    }

    #[test]
    fn feature_shapes_and_identity_upsampling() {
        let net = Network::new(&small(Variant::Full)).unwrap();
        let store = net.init::<f64>(1).unwrap();
        let mut g = Graph::new();
        let (fa, ft) = net
            .extract_features(&mut g, &store, &random(Shape::new(1, 1, 16, 16), 1), &random(Shape::new(1, 1, 8, 8), 2))
            .unwrap();
        assert_eq!(g.shape(fa.unwrap()), Shape::new(1, 4, 16, 16));
        assert_eq!(g.shape(ft), Shape::new(1, 4, 16, 16));

        let mut cfg = small(Variant::Full);
        cfg.scale = ScaleFactor::new(1).unwrap();
        let net = Network::new(&cfg).unwrap();
        let store = net.init::<f64>(1).unwrap();
        let y = random(Shape::new(1, 1, 8, 8), 2);
        let mut g = Graph::new();
        let (_, ft) = net.extract_features(&mut g, &store, &y, &y).unwrap();
        let mut plain = Graph::new();
        let yv = plain.input(y.clone()).unwrap();
        let direct = Conv2d::new("tar.head", 1, 4, 3).forward(&mut plain, &store, yv).unwrap();
        assert_eq!(g.value(ft), plain.value(direct));
    }

    #[test]
    fn zero_inputs_and_biases_give_zero_features() {
        let net = Network::new(&small(Variant::Full)).unwrap();
        let store = net.init::<f64>(1).unwrap();
        let mut g = Graph::new();
        let (fa, ft) = net
            .extract_features(&mut g, &store, &Tensor::zeros(Shape::new(1, 1, 16, 16)), &Tensor::zeros(Shape::new(1, 1, 8, 8)))
            .unwrap();
        assert!(g.value(fa.unwrap()).data().iter().all(|&v| v == 0.0));
        assert!(g.value(ft).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_aux_rejected() {
        let net = Network::new(&small(Variant::Full)).unwrap();
        let store = net.init::<f64>(1).unwrap();
        let err = net.infer(&store, &random(Shape::new(1, 1, 30, 32), 1), &random(Shape::new(1, 1, 16, 16), 2), false);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn ab1_ignores_aux() {
        let net = Network::new(&small(Variant::Ab1)).unwrap();
        let store = net.init::<f32>(4).unwrap();
        let y = random(Shape::new(1, 1, 8, 8), 5).cast::<f32>();
        let a = net.infer(&store, &random(Shape::new(1, 1, 16, 16), 6).cast(), &y, false).unwrap();
        let b = net.infer(&store, &random(Shape::new(1, 1, 16, 16), 7).cast(), &y, false).unwrap();
        let c = net.infer(&store, &Tensor::zeros(Shape::new(3, 1, 2, 2)), &y, false).unwrap();
        assert_eq!(a.sr_tar.data(), b.sr_tar.data());
        assert_eq!(a.sr_tar.data(), c.sr_tar.data());
    }

    #[test]
    fn full_model_uses_aux() {
        let net = Network::new(&small(Variant::Full)).unwrap();
        let store = net.init::<f64>(4).unwrap();
        let y = random(Shape::new(1, 1, 8, 8), 5);
        let a = net.infer(&store, &random(Shape::new(1, 1, 16, 16), 6), &y, false).unwrap();
        let b = net.infer(&store, &random(Shape::new(1, 1, 16, 16), 7), &y, false).unwrap();
        assert_ne!(a.sr_tar, b.sr_tar);
    }

    #[test]
    fn zero_parameters_give_bias_only_constant() {
        let net = Network::new(&small(Variant::Full)).unwrap();
        let mut store = net.init::<f32>(4).unwrap();
        store.fill_values(0.0);
        store
            .set_value("tar.tail.bias", Tensor::full(Shape::new(1, 1, 1, 1), 0.25))
            .unwrap();
        let out = net
            .infer(&store, &random(Shape::new(1, 1, 16, 16), 1).cast(), &random(Shape::new(1, 1, 8, 8), 2).cast(), false)
            .unwrap();
        assert!(out.sr_tar.data().iter().all(|&v| v == 0.25));
        assert!(out.sr_aux.unwrap().is_finite());
    }

    #[test]
    fn inference_is_deterministic() {
        let net = Network::new(&small(Variant::Full)).unwrap();
        let store = net.init::<f32>(9).unwrap();
        let x = random(Shape::new(1, 1, 16, 16), 1).cast::<f32>();
        let y = random(Shape::new(1, 1, 8, 8), 2).cast::<f32>();
        let a = net.infer(&store, &x, &y, true).unwrap();
        let b = net.infer(&store, &x, &y, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.init::<f32>(9).unwrap(), store);
    }
}
