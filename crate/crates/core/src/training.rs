//! Composite reconstruction and physics losses, AdamW and the training loop.
//!
//! All losses are built on the [`Graph`] so one backward pass yields the
//! gradient of the whole objective. Per-sample graphs inside a batch are
//! evaluated independently and their gradients summed in sample order, so the
//! result does not depend on how many threads ran them.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_corrupt, NoiseSchedule, DEFAULT_S_OFFSET};
use crate::error::{invalid, Error, Result};
use crate::metrics;
use crate::network::{sample_drop, Checkpoint, CheckpointMeta, CondStats, Condition, PoreDiT};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};
use crate::volume::{BinaryVolume, Dims};

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1.0;
pub const DEFAULT_LAGS: [usize; 6] = [8, 16, 32, 64, 96, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_phy: f64,
    pub lambda_s2: f64,
    pub lambda_grad: f64,
    pub warmup_epochs: usize,
    pub use_plain_mse: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_phy: 1.5,
            lambda_s2: 1.0,
            lambda_grad: 0.008,
            warmup_epochs: 3,
            use_plain_mse: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_phy", self.lambda_phy),
            ("lambda_s2", self.lambda_s2),
            ("lambda_grad", self.lambda_grad),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Physics weight in `epoch` (0-based): linear ramp up to `lambda_phy`.
    pub fn physics_weight(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            return self.lambda_phy;
        }
        self.lambda_phy * (epoch as f64 / self.warmup_epochs as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub diffusion_steps: usize,
    pub s_offset: f64,
    /// Candidate S2 lags; those not below the volume edge are dropped.
    pub s2_lags: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            batch_size: 4,
            epochs: 10,
            max_steps: None,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            diffusion_steps: 1000,
            s_offset: DEFAULT_S_OFFSET,
            s2_lags: DEFAULT_LAGS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid("batch_size and epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if self.diffusion_steps == 0 {
            return Err(invalid("diffusion_steps must be at least 1"));
        }
        Ok(())
    }

    /// Lags usable on a cube of edge `edge`.
    pub fn lags_for(&self, edge: usize) -> Vec<usize> {
        self.s2_lags.iter().copied().filter(|&r| r < edge).collect()
    }
}

/// What the losses compare against for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTarget {
    pub volume: BinaryVolume,
    pub phi: f64,
    /// `(lag, S2)` pairs, non-wrapping axis-averaged form.
    pub s2: Vec<(usize, f64)>,
}

impl LossTarget {
    pub fn from_volume(v: &BinaryVolume, lags: &[usize]) -> Result<Self> {
        let ind = v.to_indicator();
        let s2 = lags
            .iter()
            .map(|&r| Ok((r, metrics::s2_shift(&ind, v.dims(), r)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            volume: v.clone(),
            phi: v.porosity(),
            s2,
        })
    }
}

fn indicator(g: &mut Graph, v: &BinaryVolume) -> Var {
    let t = Tensor::new(v.dims().to_vec(), v.to_indicator()).expect("volume dims are positive");
    g.constant(t)
}

fn check_same(g: &Graph, p: Var, v: &BinaryVolume) -> Result<()> {
    if g.shape(p) != v.dims() {
        return Err(Error::DimMismatch(format!(
            "prediction {:?} vs target {:?}",
            g.shape(p),
            v.dims()
        )));
    }
    Ok(())
}

/// `-mean[G ln P + (1 - G) ln(1 - P)]` with `P` clamped away from 0 and 1.
pub fn bce_loss(g: &mut Graph, p: Var, target: &BinaryVolume) -> Result<Var> {
    check_same(g, p, target)?;
    let gt = indicator(g, target);
    let pc = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = g.ln(pc);
    let neg = g.scale(pc, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let lq = g.ln(one_minus);
    let a = g.mul(gt, lp)?;
    let gneg = g.scale(gt, -1.0);
    let gq = g.add_scalar(gneg, 1.0);
    let b = g.mul(gq, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// `1 - (2 ΣPG + ε) / (ΣP + ΣG + ε)`.
pub fn dice_loss(g: &mut Graph, p: Var, target: &BinaryVolume) -> Result<Var> {
    check_same(g, p, target)?;
    let gt = indicator(g, target);
    let pg = g.mul(p, gt)?;
    let inter = g.sum(pg);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let sp = g.sum(p);
    let den = g.add_scalar(sp, target.pore_count() as f64 + DICE_EPS);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Non-wrapping S2 of `p` at lag `r` along `axis`.
pub fn s2_shift_axis(g: &mut Graph, p: Var, r: usize, axis: usize) -> Result<Var> {
    let n = g.shape(p)[axis];
    if r >= n {
        return Err(invalid(format!("lag {r} not below extent {n}")));
    }
    let a = g.narrow(p, axis, 0, n - r)?;
    let b = g.narrow(p, axis, r, n - r)?;
    let prod = g.mul(a, b)?;
    Ok(g.mean(prod))
}

/// [`s2_shift_axis`] averaged over the three axes.
pub fn s2_shift(g: &mut Graph, p: Var, r: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for axis in 0..3 {
        let s = s2_shift_axis(g, p, r, axis)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(g.scale(acc.expect("three axes"), 1.0 / 3.0))
}

/// `(mean P - φ)² + λ_s2 Σ_r (Ŝ2(r) - S2(r))²`.
pub fn physics_loss(g: &mut Graph, p: Var, target: &LossTarget, lambda_s2: f64) -> Result<Var> {
    check_same(g, p, &target.volume)?;
    let mean = g.mean(p);
    let d = g.add_scalar(mean, -target.phi);
    let mut loss = g.square(d);
    if lambda_s2 > 0.0 {
        if target.s2.is_empty() {
            return Err(invalid("no S2 lag below the volume edge"));
        }
        let mut acc: Option<Var> = None;
        for &(r, s2) in &target.s2 {
            let est = s2_shift(g, p, r)?;
            let diff = g.add_scalar(est, -s2);
            let sq = g.square(diff);
            acc = Some(match acc {
                Some(a) => g.add(a, sq)?,
                None => sq,
            });
        }
        let s2_term = g.scale(acc.expect("non-empty lags"), lambda_s2);
        loss = g.add(loss, s2_term)?;
    }
    Ok(loss)
}

/// Mean over axes of the MSE between forward differences of `P` and `G`.
pub fn gradient_loss(g: &mut Graph, p: Var, target: &BinaryVolume) -> Result<Var> {
    check_same(g, p, target)?;
    let gt = indicator(g, target);
    let mut acc: Option<Var> = None;
    for axis in 0..3 {
        let n = g.shape(p)[axis];
        if n < 2 {
            continue;
        }
        let diff = |g: &mut Graph, x: Var| -> Result<Var> {
            let hi = g.narrow(x, axis, 1, n - 1)?;
            let lo = g.narrow(x, axis, 0, n - 1)?;
            Ok(g.sub(hi, lo)?)
        };
        let dp = diff(g, p)?;
        let dg = diff(g, gt)?;
        let e = g.sub(dp, dg)?;
        let e = g.square(e);
        let m = g.mean(e);
        acc = Some(match acc {
            Some(a) => g.add(a, m)?,
            None => m,
        });
    }
    match acc {
        Some(a) => Ok(g.scale(a, 1.0 / 3.0)),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub grad: f64,
    pub phys: f64,
    pub phys_weight: f64,
    pub mse: f64,
}

/// Training objective on `logits`. Returns the root and its parts.
pub fn total_loss(
    g: &mut Graph,
    logits: Var,
    target: &LossTarget,
    w: &LossWeights,
    epoch: usize,
) -> Result<(Var, LossBreakdown)> {
    check_same(g, logits, &target.volume)?;
    if w.use_plain_mse {
        let half = g.scale(logits, 0.5);
        let x0 = g.tanh(half);
        let t = Tensor::new(target.volume.dims().to_vec(), target.volume.to_signed().into_values())?;
        let t = g.constant(t);
        let e = g.sub(x0, t)?;
        let e = g.square(e);
        let m = g.mean(e);
        let v = g.value(m).item().expect("scalar");
        return Ok((
            m,
            LossBreakdown {
                total: v,
                mse: v,
                ..Default::default()
            },
        ));
    }
    let p = g.sigmoid(logits);
    let bce = bce_loss(g, p, &target.volume)?;
    let dice = dice_loss(g, p, &target.volume)?;
    let grad = gradient_loss(g, p, &target.volume)?;
    let mut total = g.add(bce, dice)?;
    let gw = g.scale(grad, w.lambda_grad);
    total = g.add(total, gw)?;
    let pw = w.physics_weight(epoch);
    let mut phys_v = 0.0;
    if pw > 0.0 {
        let phys = physics_loss(g, p, target, w.lambda_s2)?;
        phys_v = g.value(phys).item().expect("scalar");
        let pwv = g.scale(phys, pw);
        total = g.add(total, pwv)?;
    }
    let val = |g: &Graph, v: Var| g.value(v).item().expect("scalar");
    let parts = LossBreakdown {
        total: val(g, total),
        bce: val(g, bce),
        dice: val(g, dice),
        grad: val(g, grad),
        phys: phys_v,
        phys_weight: pw,
        mse: 0.0,
    };
    Ok((total, parts))
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, shapes: &[Tensor]) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *x -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
}

/// Write the per-epoch log as CSV.
pub fn write_epoch_csv(logs: &[EpochLog], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,steps,total,bce,dice,grad,phys,phys_weight,mse")?;
    for l in logs {
        let m = &l.mean;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            l.epoch, l.steps, m.total, m.bce, m.dice, m.grad, m.phys, m.phys_weight, m.mse
        )?;
    }
    Ok(())
}

struct SampleResult {
    grads: Vec<Vec<f64>>,
    parts: LossBreakdown,
}

#[allow(clippy::too_many_arguments)]
fn sample_gradient(
    model: &PoreDiT,
    target: &LossTarget,
    stats: &CondStats,
    sched: &NoiseSchedule,
    weights: &LossWeights,
    epoch: usize,
    seed: u64,
    draw: u64,
) -> Result<SampleResult> {
    let mut r = rng::stream(seed, "train-draw", draw);
    let t = r.random_range(1..=sched.len());
    let drop = sample_drop(&mut r, model.config().cond_dropout);
    let x0 = target.volume.to_signed();
    let eps = rng::normal_field(seed, "train-eps", draw, x0.len());
    let xt = forward_corrupt(&x0, t, &eps, sched)?;
    let cond = Condition {
        t,
        phi_norm: stats.normalize(target.phi),
        s2: (model.config().s2_features > 0).then(|| target.s2.iter().map(|&(_, v)| v).collect()),
    };
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let logits = model.forward(&mut g, &b, xt.values(), &cond, drop)?;
    let (root, parts) = total_loss(&mut g, logits, target, weights, epoch)?;
    let mut grads = g.backward(root)?;
    let grads = b
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.take(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok(SampleResult { grads, parts })
}

/// Algorithm: for each step, corrupt a batch of training volumes at random
/// timesteps, predict x0, and apply one AdamW update on the mean loss.
pub fn train(
    dataset: &[BinaryVolume],
    model: PoreDiT,
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    if dataset.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let dims: Dims = model.config().dims();
    if let Some(v) = dataset.iter().find(|v| v.dims() != dims) {
        return Err(Error::DimMismatch(format!(
            "training volume {:?} vs model input {:?}",
            v.dims(),
            dims
        )));
    }
    let lags = cfg.lags_for(model.config().input_size);
    if weights.lambda_s2 > 0.0 && weights.lambda_phy > 0.0 && lags.is_empty() {
        return Err(invalid("no S2 lag below the volume edge"));
    }
    if model.config().s2_features > 0 && model.config().s2_features != lags.len() {
        return Err(invalid(format!(
            "model expects {} S2 features but {} lags are usable",
            model.config().s2_features,
            lags.len()
        )));
    }
    let targets: Vec<LossTarget> = dataset
        .iter()
        .map(|v| LossTarget::from_volume(v, &lags))
        .collect::<Result<_>>()?;
    let stats = CondStats::from_samples(&targets.iter().map(|t| t.phi).collect::<Vec<_>>());
    let sched = NoiseSchedule::cosine(cfg.diffusion_steps, cfg.s_offset)?;

    let mut model = model;
    let mut opt = AdamW::new(cfg, model.params().tensors());
    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0usize;
    let per_epoch = dataset.len().div_ceil(cfg.batch_size);
    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        let mut sum = LossBreakdown::default();
        let mut steps_here = 0;
        for b in 0..per_epoch {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let batch = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
            let results: Vec<Result<SampleResult>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let draw = (step * cfg.batch_size + k) as u64;
                    sample_gradient(&model, &targets[i], &stats, &sched, weights, epoch, cfg.seed, draw)
                })
                .collect();
            let mut grads: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            let mut parts = LossBreakdown::default();
            for r in results {
                let r = r?;
                for (acc, gi) in grads.iter_mut().zip(&r.grads) {
                    for (a, x) in acc.iter_mut().zip(gi) {
                        *a += x;
                    }
                }
                add_parts(&mut parts, &r.parts, 1.0);
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|x| *x *= scale);
            let mut mean = LossBreakdown::default();
            add_parts(&mut mean, &parts, scale);
            if !mean.total.is_finite() || grads.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    loss: mean.total,
                });
            }
            opt.step(model.params_mut().tensors_mut(), &grads);
            model.params_mut().round_to_f32();
            step_losses.push(mean.total);
            on_step(step, mean.total);
            add_parts(&mut sum, &mean, 1.0);
            steps_here += 1;
            step += 1;
        }
        if steps_here > 0 {
            let mut m = LossBreakdown::default();
            add_parts(&mut m, &sum, 1.0 / steps_here as f64);
            epochs.push(EpochLog {
                epoch,
                steps: steps_here,
                mean: m,
            });
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            meta: CheckpointMeta {
                cond_stats: stats,
                diffusion_steps: cfg.diffusion_steps,
                s_offset: cfg.s_offset,
                s2_lags: lags,
            },
        },
        step_losses,
        epochs,
    })
}

fn add_parts(acc: &mut LossBreakdown, x: &LossBreakdown, s: f64) {
    acc.total += s * x.total;
    acc.bce += s * x.bce;
    acc.dice += s * x.dice;
    acc.grad += s * x.grad;
    acc.phys += s * x.phys;
    acc.phys_weight += s * x.phys_weight;
    acc.mse += s * x.mse;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::bernoulli;

    fn prob(g: &mut Graph, dims: Dims, f: impl Fn(usize) -> f64) -> Var {
        let n = dims.iter().product();
        g.constant(Tensor::new(dims.to_vec(), (0..n).map(f).collect()).unwrap())
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn bce_cases() {
        let v = bernoulli([4, 4, 4], 0.4, 1);
        let mut g = Graph::new();
        let half = prob(&mut g, [4, 4, 4], |_| 0.5);
        let l = bce_loss(&mut g, half, &v).unwrap();
        assert!((scalar(&g, l) - std::f64::consts::LN_2).abs() < 1e-12);
        let exact = g.constant(Tensor::new(vec![4, 4, 4], v.to_indicator()).unwrap());
        let l = bce_loss(&mut g, exact, &v).unwrap();
        assert!(scalar(&g, l) <= 1e-6);
    }

    #[test]
    fn dice_cases() {
        let v = bernoulli([4, 4, 4], 0.4, 2);
        let mut g = Graph::new();
        let same = g.constant(Tensor::new(vec![4, 4, 4], v.to_indicator()).unwrap());
        let l = dice_loss(&mut g, same, &v).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
        let inv = g.constant(Tensor::new(vec![4, 4, 4], v.complement().to_indicator()).unwrap());
        let l = dice_loss(&mut g, inv, &v).unwrap();
        assert!(scalar(&g, l) > 0.95);
        let empty = BinaryVolume::zeros([4, 4, 4]);
        let zero = prob(&mut g, [4, 4, 4], |_| 0.0);
        let l = dice_loss(&mut g, zero, &empty).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
    }

    #[test]
    fn s2_shift_cases() {
        let v = bernoulli([6, 6, 6], 0.3, 3);
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![6, 6, 6], v.to_indicator()).unwrap());
        let s0 = s2_shift(&mut g, p, 0).unwrap();
        assert!((scalar(&g, s0) - v.porosity()).abs() < 1e-15);
        let ones = prob(&mut g, [6, 6, 6], |_| 1.0);
        let s = s2_shift(&mut g, ones, 4).unwrap();
        assert_eq!(scalar(&g, s), 1.0);
        let s3 = s2_shift(&mut g, p, 3).unwrap();
        let plain = metrics::s2_shift(&v.to_indicator(), [6, 6, 6], 3).unwrap();
        assert!((scalar(&g, s3) - plain).abs() < 1e-15);
        assert!(s2_shift(&mut g, p, 6).is_err());
    }

    #[test]
    fn physics_and_gradient_zero_at_target() {
        let v = bernoulli([8, 8, 8], 0.3, 4);
        let t = LossTarget::from_volume(&v, &[1, 3]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![8, 8, 8], v.to_indicator()).unwrap());
        let l = physics_loss(&mut g, p, &t, 1.0).unwrap();
        assert!(scalar(&g, l).abs() < 1e-10);
        let l = gradient_loss(&mut g, p, &v).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
        let c = prob(&mut g, [8, 8, 8], |_| 0.3);
        let l = gradient_loss(&mut g, c, &BinaryVolume::zeros([8, 8, 8])).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
        let empty = LossTarget { s2: vec![], ..t };
        assert!(physics_loss(&mut g, p, &empty, 1.0).is_err());
        assert!(physics_loss(&mut g, p, &empty, 0.0).is_ok());
    }

    #[test]
    fn gradient_loss_ramp_against_constant() {
        // P ramps along x: 0, 1/3, 2/3, 1; G is all solid. The x differences
        // are 1/3 everywhere, y and z differences are 0.
        let mut g = Graph::new();
        let p = prob(&mut g, [4, 4, 4], |i| (i % 4) as f64 / 3.0);
        let l = gradient_loss(&mut g, p, &BinaryVolume::zeros([4, 4, 4])).unwrap();
        let expect = (1.0 / 9.0) / 3.0;
        assert!((scalar(&g, l) - expect).abs() < 1e-15);
    }

    #[test]
    fn warmup_is_linear() {
        let w = LossWeights::default();
        assert_eq!(w.physics_weight(0), 0.0);
        assert_eq!(w.physics_weight(1), 0.5);
        assert_eq!(w.physics_weight(2), 1.0);
        assert_eq!(w.physics_weight(3), 1.5);
        assert_eq!(w.physics_weight(10), 1.5);
    }

    #[test]
    fn plain_mse_is_bounded() {
        let v = bernoulli([4, 4, 4], 0.5, 5);
        let mut g = Graph::new();
        let l = prob(&mut g, [4, 4, 4], |i| ((i * 13 % 7) as f64 - 3.0) * 2.0);
        let w = LossWeights {
            use_plain_mse: true,
            ..Default::default()
        };
        let t = LossTarget::from_volume(&v, &[]).unwrap();
        let (root, parts) = total_loss(&mut g, l, &t, &w, 0).unwrap();
        assert!(scalar(&g, root) >= 0.0 && scalar(&g, root) <= 4.0);
        assert_eq!(parts.total, parts.mse);
    }
}
