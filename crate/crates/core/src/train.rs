//! Joint dual-contrast objective, Adam and the training loop.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::{self, float_or_inf};
use crate::model::{ModelConfig, Network};
use crate::params::ParamStore;
use crate::phantom::SamplePair;
use crate::tensor::{Scalar, Tensor};

/// Pixel loss used for both contrasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    L1,
    L2,
}

fn d_lr() -> f64 {
    1e-5
}
fn d_epochs() -> usize {
    50
}
fn d_batch() -> usize {
    1
}
fn d_alpha() -> f64 {
    0.7
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

/// Optimisation hyperparameters. Missing keys take the reference defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Step budget; when set it overrides `epochs`.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Weight of the target term in the joint loss.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: d_lr(),
            epochs: d_epochs(),
            steps: None,
            batch_size: d_batch(),
            alpha: d_alpha(),
            seed: 0,
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            loss: LossKind::L1,
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile: lr 1e-3, 200 steps, batch 4.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps: Some(200),
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.steps.unwrap_or(self.epochs) == 0 {
            return Err(Error::config("training budget must be at least one epoch or step"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        Ok(())
    }
}

fn pixel_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>, kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::L1 => g.mean_abs_error(pred, gt),
        LossKind::L2 => g.mean_squared_error(pred, gt),
    }
}

/// `α·E(x̂_tar, x_tar) + (1 − α)·E(x̂_aux, x_aux)` on the tape, with `E` the
/// batch mean of per-sample mean errors. Without an auxiliary
/// reconstruction the target term is used alone.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred_tar: Var,
    gt_tar: &Tensor<T>,
    aux: Option<(Var, &Tensor<T>)>,
    alpha: f64,
    kind: LossKind,
) -> Result<Var> {
    let tar = pixel_loss(g, pred_tar, gt_tar, kind)?;
    match aux {
        Some((pred_aux, gt_aux)) => {
            let aux = pixel_loss(g, pred_aux, gt_aux, kind)?;
            g.weighted_sum(&[(tar, T::from_f64_lossy(alpha)), (aux, T::from_f64_lossy(1.0 - alpha))])
        }
        None => Ok(tar),
    }
}

/// Per-sample mean absolute error, averaged over the batch.
fn batch_mae(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    pred.expect_shape(gt.shape())?;
    let n = pred.shape().n();
    let per = pred.shape().item();
    let total: f64 = (0..n)
        .map(|i| {
            let (p, q) = (&pred.data()[i * per..(i + 1) * per], &gt.data()[i * per..(i + 1) * per]);
            p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / per as f64
        })
        .sum();
    Ok(total / n as f64)
}

/// Joint L1 loss evaluated directly on tensors.
pub fn joint_l1_loss(
    pred_tar: &Tensor<f64>,
    gt_tar: &Tensor<f64>,
    aux: Option<(&Tensor<f64>, &Tensor<f64>)>,
    alpha: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let tar = batch_mae(pred_tar, gt_tar)?;
    match aux {
        Some((p, q)) => Ok(alpha * tar + (1.0 - alpha) * batch_mae(p, q)?),
        None => Ok(tar),
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients. Fails without
    /// touching any parameter if a gradient is not finite.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, p) in store.iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient for {name}")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; p.value.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; p.value.len()]);
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                let g = g.to_f64_lossy();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = T::from_f64_lossy(w.to_f64_lossy() - update);
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    #[serde(with = "opt_float_or_inf")]
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
}

mod opt_float_or_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::float_or_inf")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(Wrap).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub log: Vec<LogRecord>,
    /// Parameters with the best validation PSNR (the final ones when there
    /// is no validation split).
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub last: ParamStore<f32>,
}

fn stack<'a>(samples: &[&'a SamplePair], pick: impl Fn(&'a SamplePair) -> &'a Array2<f32>) -> Result<Tensor<f32>> {
    Tensor::stack_images(&samples.iter().map(|s| pick(s)).collect::<Vec<_>>())
}

/// Target reconstructions for `samples`, in order.
pub fn predict(
    net: &Network,
    store: &ParamStore<f32>,
    samples: &[SamplePair],
    batch_size: usize,
) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let x_aux = stack(&refs, |s| &s.x_aux)?;
        let y_tar = stack(&refs, |s| &s.y_tar)?;
        let sr = net.infer(store, &x_aux, &y_tar, false)?.sr_tar;
        out.extend((0..chunk.len()).map(|i| sr.image(i, 0)));
    }
    Ok(out)
}

/// Scores target reconstructions of `samples` against their HR targets.
pub fn evaluate(
    net: &Network,
    store: &ParamStore<f32>,
    samples: &[SamplePair],
    batch_size: usize,
) -> Result<metrics::MetricReport> {
    let preds = predict(net, store, samples, batch_size)?;
    let rows = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| metrics::SampleMetrics::compute(s.id.clone(), p, &s.x_tar))
        .collect::<Result<Vec<_>>>()?;
    metrics::MetricReport::new(rows)
}

/// Trains a fresh network. `on_record` sees each log line as it is made.
///
/// Each epoch visits the training set once in a seeded shuffle; a step
/// budget, when configured, may end training mid-epoch, in which case the
/// partial epoch still gets a record. Parameters are initialised from the
/// training seed.
pub fn fit(
    cfg: &ModelConfig,
    train: &[SamplePair],
    val: &[SamplePair],
    tcfg: &TrainConfig,
    mut on_record: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<FitResult> {
    tcfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let net = Network::new(cfg)?;
    let mut store: ParamStore<f32> = net.init(tcfg.seed)?;
    let mut adam = Adam::new(tcfg);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5eed_0f_ba7c);
    let budget = tcfg.steps.unwrap_or(usize::MAX);
    let max_epochs = if tcfg.steps.is_some() { usize::MAX } else { tcfg.epochs };

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut epoch = 0;
    while epoch < max_epochs && step < budget {
        epoch += 1;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(tcfg.batch_size) {
            if step >= budget {
                break;
            }
            let refs: Vec<&SamplePair> = idx.iter().map(|&i| &train[i]).collect();
            let x_aux = stack(&refs, |s| &s.x_aux)?;
            let x_tar = stack(&refs, |s| &s.x_tar)?;
            let y_tar = stack(&refs, |s| &s.y_tar)?;

            let mut g = Graph::new();
            let out = net.forward(&mut g, &store, &x_aux, &y_tar)?;
            let loss = joint_loss(
                &mut g,
                out.sr_tar,
                &x_tar,
                out.sr_aux.map(|v| (v, &x_aux)),
                tcfg.alpha,
                tcfg.loss,
            )?;
            let value = g.scalar(loss).to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::numeric(format!("loss became {value} at step {}", step + 1)));
            }
            let grads = g.backward(loss)?;
            store.zero_grads();
            grads.accumulate_into(&mut store)?;
            adam.step(&mut store)?;
            step += 1;
            loss_sum += value;
            batches += 1;
        }

        let (val_psnr, val_ssim) = if val.is_empty() {
            (None, None)
        } else {
            let report = evaluate(&net, &store, val, tcfg.batch_size)?;
            (Some(report.aggregate.psnr), Some(report.aggregate.ssim))
        };
        let record = LogRecord {
            epoch,
            step,
            loss: loss_sum / batches as f64,
            val_psnr,
            val_ssim,
        };
        on_record(&record)?;
        log.push(record);
        let score = val_psnr.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().map_or(true, |(b, _, _)| score > *b || val.is_empty()) {
            best = Some((score, epoch, store.clone()));
        }
    }
    let (_, best_epoch, best) = best.ok_or_else(|| Error::Data("no training epochs ran".into()))?;
    Ok(FitResult {
        log,
        best,
        best_epoch,
        last: store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::ScaleFactor;
    use crate::phantom::generate_phantom;
    use crate::tensor::Shape;

    fn t(shape: Shape, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn joint_loss_examples() {
        let s = Shape::new(1, 1, 1, 2);
        let gt = t(s, vec![0.5, 0.5]);
        assert_eq!(joint_l1_loss(&gt, &gt, Some((&gt, &gt)), 0.7).unwrap(), 0.0);
        let tar = t(s, vec![0.7, 0.3]);
        let aux = t(s, vec![0.6, 0.4]);
        let l = joint_l1_loss(&tar, &gt, Some((&aux, &gt)), 0.7).unwrap();
        assert!((l - 0.17).abs() < 1e-12);
        assert_eq!(joint_l1_loss(&tar, &gt, Some((&aux, &gt)), 1.0).unwrap(), joint_l1_loss(&tar, &gt, None, 0.3).unwrap());
        assert!(joint_l1_loss(&tar, &gt, None, 1.5).is_err());
        assert!(joint_l1_loss(&tar, &t(Shape::new(1, 1, 2, 1), vec![0.0; 2]), None, 0.5).is_err());
    }

    #[test]
    fn tape_loss_matches_direct() {
        let s = Shape::new(2, 1, 2, 2);
        let mk = |k: f64| Tensor::from_fn(s, |[n, _, h, w]| (n * 4 + h * 2 + w) as f64 * k);
        let (pt, gt, pa, ga) = (mk(0.1), mk(0.13), mk(-0.2), mk(0.05));
        let mut g = Graph::new();
        let vt = g.input(pt.clone()).unwrap();
        let va = g.input(pa.clone()).unwrap();
        let l = joint_loss(&mut g, vt, &gt, Some((va, &ga)), 0.7, LossKind::L1).unwrap();
        let direct = joint_l1_loss(&pt, &gt, Some((&pa, &ga)), 0.7).unwrap();
        assert!((g.scalar(l) - direct).abs() < 1e-12);
    }

    fn scalar_store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(Shape::new(1, 1, 1, 1), v), true).unwrap();
        s
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        for g in [3.0f32, -0.01] {
            let mut s = scalar_store(1.0);
            s.get_mut("w").unwrap().grad.fill(g);
            let mut adam = Adam::new(&TrainConfig {
                lr: 0.01,
                ..TrainConfig::default()
            });
            adam.step(&mut s).unwrap();
            let moved = s.value("w").unwrap().data()[0] as f64 - 1.0;
            let want = -0.01 * g as f64 / (g.abs() as f64 + 1e-8);
            assert!((moved - want).abs() < 1e-6, "{moved} vs {want}");
        }
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut s = scalar_store(0.3);
        let mut adam = Adam::new(&TrainConfig::desk());
        for _ in 0..5 {
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.value("w").unwrap().data()[0], 0.3);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn adam_rejects_nan_before_updating() {
        let mut s = scalar_store(0.3);
        s.insert("b", Tensor::full(Shape::new(1, 1, 1, 1), 0.5), true).unwrap();
        s.get_mut("b").unwrap().grad.fill(1.0);
        s.get_mut("w").unwrap().grad.fill(f32::NAN);
        let mut adam = Adam::new(&TrainConfig::desk());
        assert!(matches!(adam.step(&mut s), Err(Error::Numeric(_))));
        assert_eq!(s.value("b").unwrap().data()[0], 0.5);
    }

    #[test]
    fn adam_skips_frozen() {
        let mut s = ParamStore::<f32>::new();
        s.insert("f", Tensor::full(Shape::new(1, 1, 1, 1), 2.0), false).unwrap();
        s.get_mut("f").unwrap().grad.fill(1.0);
        Adam::new(&TrainConfig::desk()).step(&mut s).unwrap();
        assert_eq!(s.value("f").unwrap().data()[0], 2.0);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!((c.lr, c.epochs, c.alpha, c.beta1, c.beta2, c.eps), (1e-5, 50, 0.7, 0.9, 0.999, 1e-8));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
        assert!(TrainConfig { lr: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { alpha: -0.1, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
    }

    fn tiny_data(n: usize) -> Vec<SamplePair> {
        let s = ScaleFactor::new(2).unwrap();
        (0..n)
            .map(|i| SamplePair::from_phantom(format!("p{i}"), generate_phantom(i as u64, (16, 16), 3).unwrap(), s).unwrap())
            .collect()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            groups: 1,
            width: 4,
            blocks: 1,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn one_epoch_two_samples_one_record() {
        let data = tiny_data(3);
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let r = fit(&tiny_model(), &data[..2], &data[2..], &tcfg, |_| Ok(())).unwrap();
        assert_eq!(r.log.len(), 1);
        assert_eq!(r.log[0].step, 2);
        assert!(r.log[0].loss.is_finite());
        assert!(r.log[0].val_psnr.unwrap().is_finite());
    }

    #[test]
    fn step_budget_ends_mid_epoch() {
        let data = tiny_data(3);
        let tcfg = TrainConfig {
            steps: Some(4),
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let r = fit(&tiny_model(), &data, &[], &tcfg, |_| Ok(())).unwrap();
        let steps: Vec<usize> = r.log.iter().map(|l| l.step).collect();
        assert_eq!(steps, [2, 4]);
        assert!(r.log.iter().all(|l| l.val_psnr.is_none()));
        assert_eq!(r.best, r.last);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = tiny_data(3);
        let tcfg = TrainConfig {
            steps: Some(3),
            lr: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = fit(&tiny_model(), &data[..2], &data[2..], &tcfg, |_| Ok(())).unwrap();
        let b = fit(&tiny_model(), &data[..2], &data[2..], &tcfg, |_| Ok(())).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.last, b.last);
    }

    #[test]
    fn validation_ignores_training_data() {
        let data = tiny_data(4);
        let net = Network::new(&tiny_model()).unwrap();
        let store = net.init::<f32>(1).unwrap();
        let a = evaluate(&net, &store, &data[3..], 2).unwrap();
        let mut other = data.clone();
        other[0].x_tar.fill(0.9);
        let b = evaluate(&net, &store, &other[3..], 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_record_json_shape() {
        let r = LogRecord {
            epoch: 1,
            step: 2,
            loss: 0.5,
            val_psnr: Some(f64::INFINITY),
            val_ssim: Some(1.0),
        };
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(text, r#"{"epoch":1,"step":2,"loss":0.5,"val_psnr":"inf","val_ssim":1.0}"#);
        assert_eq!(serde_json::from_str::<LogRecord>(&text).unwrap(), r);
    }
}
