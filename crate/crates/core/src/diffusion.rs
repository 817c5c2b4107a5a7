//! Cosine noise schedule, forward corruption and the two reverse samplers.
//!
//! A [`NoiseSchedule`] indexes its steps `0..=len`. The full training schedule
//! has `timesteps[k] = k`; a respaced schedule keeps a subsequence of the
//! training steps (always including 0 and `T`) and recomputes `beta` from
//! consecutive `alpha_bar` values so that fewer model evaluations cover the
//! same noise range.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics;
use crate::rng;
use crate::volume::{voxel_count, BinaryVolume, Dims, SignedVolume};

pub const DEFAULT_S_OFFSET: f64 = 0.008;
pub const BETA_MAX: f64 = 0.999;

/// RNG tag for the initial state `x_T`.
pub const TAG_INIT: &str = "sample-init";
/// RNG tag for the per-step noise `z`, indexed by schedule step.
pub const TAG_STEP: &str = "sample-z";

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    train_steps: usize,
    s_offset: f64,
    timesteps: Vec<usize>,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
}

fn cosine_f(t: f64, big_t: f64, s: f64) -> f64 {
    let c = ((t / big_t + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
    c * c
}

fn betas_from(alpha_bar: &[f64]) -> Vec<f64> {
    let mut beta = vec![0.0; alpha_bar.len()];
    for k in 1..alpha_bar.len() {
        beta[k] = (1.0 - alpha_bar[k] / alpha_bar[k - 1]).min(BETA_MAX);
    }
    beta
}

impl NoiseSchedule {
    pub fn cosine(steps: usize, s_offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(s_offset > 0.0 && s_offset.is_finite()) {
            return Err(invalid(format!("s_offset must be positive, got {s_offset}")));
        }
        let big_t = steps as f64;
        let f0 = cosine_f(0.0, big_t, s_offset);
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|t| cosine_f(t as f64, big_t, s_offset) / f0)
            .collect();
        Ok(Self {
            train_steps: steps,
            s_offset,
            timesteps: (0..=steps).collect(),
            beta: betas_from(&alpha_bar),
            alpha_bar,
        })
    }

    /// Keep `n` reverse steps, evenly spread over the training steps.
    pub fn respace(&self, n: usize) -> Result<Self> {
        let big_t = self.train_steps;
        if n == 0 || n > big_t {
            return Err(invalid(format!("respaced step count must be in [1, {big_t}], got {n}")));
        }
        let timesteps: Vec<usize> = (0..=n)
            .map(|k| ((k as f64) * big_t as f64 / n as f64).round() as usize)
            .collect();
        let alpha_bar: Vec<f64> = timesteps.iter().map(|&t| self.alpha_bar_train(t)).collect();
        Ok(Self {
            train_steps: big_t,
            s_offset: self.s_offset,
            beta: betas_from(&alpha_bar),
            timesteps,
            alpha_bar,
        })
    }

    fn alpha_bar_train(&self, t: usize) -> f64 {
        let f0 = cosine_f(0.0, self.train_steps as f64, self.s_offset);
        cosine_f(t as f64, self.train_steps as f64, self.s_offset) / f0
    }

    /// Number of reverse steps.
    pub fn len(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn s_offset(&self) -> f64 {
        self.s_offset
    }

    /// Training-schedule timestep presented to the model at step `k`.
    pub fn timestep(&self, k: usize) -> usize {
        self.timesteps[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `beta[0]` is 0 by convention.
    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k]
    }

    pub fn signal_coeff(&self, k: usize) -> f64 {
        self.alpha_bar[k].sqrt()
    }

    pub fn noise_coeff(&self, k: usize) -> f64 {
        (1.0 - self.alpha_bar[k]).sqrt()
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k > self.len() {
            return Err(invalid(format!("timestep {k} outside [0, {}]", self.len())));
        }
        Ok(())
    }
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_corrupt(x0: &SignedVolume, k: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<SignedVolume> {
    sched.check_step(k)?;
    if eps.len() != x0.len() {
        return Err(crate::Error::DimMismatch(format!(
            "noise has {} values, volume has {}",
            eps.len(),
            x0.len()
        )));
    }
    let (a, b) = (sched.signal_coeff(k), sched.noise_coeff(k));
    let values = x0.values().iter().zip(eps).map(|(x, e)| a * x + b * e).collect();
    SignedVolume::new(x0.dims(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub scale: f64,
    pub enabled: bool,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            scale: 1.0,
            enabled: false,
        }
    }
}

impl GuidanceSpec {
    pub fn with_scale(scale: f64) -> Self {
        Self {
            scale,
            enabled: scale != 1.0,
        }
    }

    pub fn effective_scale(&self) -> f64 {
        if self.enabled {
            self.scale
        } else {
            1.0
        }
    }

    /// Whether the unconditional branch has to be evaluated at all.
    pub fn needs_uncond(&self) -> bool {
        self.effective_scale() != 1.0
    }
}

pub fn cfg_combine(uncond: &[f64], cond: &[f64], g: &GuidanceSpec) -> Vec<f64> {
    let s = g.effective_scale();
    uncond.iter().zip(cond).map(|(u, c)| u + s * (c - u)).collect()
}

/// Map logits to the signed signal range.
pub fn x0_from_logits(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|l| (0.5 * l).tanh()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SampleMode {
    Ddim { eta: f64 },
    Ancestral,
}

impl Default for SampleMode {
    fn default() -> Self {
        SampleMode::Ancestral
    }
}

/// Deterministic part of a reverse step and the scale of its noise term:
/// `x_{k-1} = mean + sigma * z`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParts {
    pub mean: Vec<f64>,
    pub sigma: f64,
}

impl StepParts {
    pub fn apply(mut self, z: &[f64]) -> Vec<f64> {
        if self.sigma != 0.0 {
            for (m, zi) in self.mean.iter_mut().zip(z) {
                *m += self.sigma * zi;
            }
        }
        self.mean
    }
}

pub fn ddim_parts(x_t: &[f64], x0_hat: &[f64], k: usize, eta: f64, sched: &NoiseSchedule) -> Result<StepParts> {
    step_guard(k, sched)?;
    let (a_t, b_t) = (sched.signal_coeff(k), sched.noise_coeff(k));
    let (a_p, b_p) = (sched.signal_coeff(k - 1), sched.noise_coeff(k - 1));
    let mean = x_t
        .iter()
        .zip(x0_hat)
        .map(|(x, x0)| {
            let eps = (x - a_t * x0) / b_t;
            a_p * x0 + b_p * eps
        })
        .collect();
    let sigma = if k == 1 { 0.0 } else { eta * b_p };
    Ok(StepParts { mean, sigma })
}

/// The two posterior-mean coefficients `(on x0_hat, on x_t)` and the
/// posterior variance at step `k`.
pub fn posterior_coeffs(k: usize, sched: &NoiseSchedule) -> (f64, f64, f64) {
    let ab_t = sched.alpha_bar(k);
    let ab_p = sched.alpha_bar(k - 1);
    let beta = sched.beta(k);
    let alpha = 1.0 - beta;
    let c0 = ab_p.sqrt() * beta / (1.0 - ab_t);
    let ct = alpha.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
    let var = (1.0 - ab_p) / (1.0 - ab_t) * beta;
    (c0, ct, var)
}

pub fn ancestral_parts(x_t: &[f64], x0_hat: &[f64], k: usize, sched: &NoiseSchedule) -> Result<StepParts> {
    step_guard(k, sched)?;
    let (c0, ct, var) = posterior_coeffs(k, sched);
    let mean = x_t.iter().zip(x0_hat).map(|(x, x0)| c0 * x0 + ct * x).collect();
    Ok(StepParts {
        mean,
        sigma: var.max(0.0).sqrt(),
    })
}

pub fn step_parts(x_t: &[f64], x0_hat: &[f64], k: usize, mode: SampleMode, sched: &NoiseSchedule) -> Result<StepParts> {
    match mode {
        SampleMode::Ddim { eta } => ddim_parts(x_t, x0_hat, k, eta, sched),
        SampleMode::Ancestral => ancestral_parts(x_t, x0_hat, k, sched),
    }
}

pub fn ddim_step(x_t: &[f64], x0_hat: &[f64], k: usize, eta: f64, sched: &NoiseSchedule, z: &[f64]) -> Result<Vec<f64>> {
    Ok(ddim_parts(x_t, x0_hat, k, eta, sched)?.apply(z))
}

pub fn ancestral_step(x_t: &[f64], x0_hat: &[f64], k: usize, sched: &NoiseSchedule, z: &[f64]) -> Result<Vec<f64>> {
    Ok(ancestral_parts(x_t, x0_hat, k, sched)?.apply(z))
}

fn step_guard(k: usize, sched: &NoiseSchedule) -> Result<()> {
    if k == 0 || k > sched.len() {
        return Err(invalid(format!("reverse step needs t in [1, {}], got {k}", sched.len())));
    }
    Ok(())
}

/// Anything that predicts x0 logits for a noisy volume.
///
/// The condition is owned by the implementor; `uncond` asks for the branch
/// with the condition replaced by the null embedding.
pub trait Denoiser {
    fn dims(&self) -> Dims;
    fn logits(&self, x_t: &SignedVolume, timestep: usize, uncond: bool) -> Result<Vec<f64>>;
}

/// Guided x0 estimate for one state.
pub fn predict_x0(model: &dyn Denoiser, x_t: &SignedVolume, timestep: usize, g: &GuidanceSpec) -> Result<Vec<f64>> {
    let cond = model.logits(x_t, timestep, false)?;
    let logits = if g.needs_uncond() {
        let uncond = model.logits(x_t, timestep, true)?;
        cfg_combine(&uncond, &cond, g)
    } else {
        cond
    };
    Ok(x0_from_logits(&logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub field: SignedVolume,
    pub volume: BinaryVolume,
    pub threshold: f64,
}

/// Full reverse loop from pure noise, then Otsu binarisation.
pub fn sample(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    mode: SampleMode,
    g: &GuidanceSpec,
    seed: u64,
) -> Result<SampleOutput> {
    let dims = model.dims();
    let n = voxel_count(dims);
    let mut x = SignedVolume::new(dims, rng::normal_field(seed, TAG_INIT, 0, n))?;
    for k in (1..=sched.len()).rev() {
        let x0_hat = predict_x0(model, &x, sched.timestep(k), g)?;
        let parts = step_parts(x.values(), &x0_hat, k, mode, sched)?;
        let next = if parts.sigma != 0.0 {
            parts.apply(&rng::normal_field(seed, TAG_STEP, k as u64, n))
        } else {
            parts.mean
        };
        x = SignedVolume::new(dims, next)?;
    }
    finish(x)
}

pub(crate) fn finish(field: SignedVolume) -> Result<SampleOutput> {
    let (volume, threshold) = metrics::otsu(field.values(), field.dims())?;
    Ok(SampleOutput {
        field,
        volume,
        threshold,
    })
}
