use poredit::diffusion::{
    ancestral_parts, ddim_step, forward_corrupt, sample, Denoiser, GuidanceSpec, NoiseSchedule, SampleMode,
    DEFAULT_S_OFFSET,
};
use poredit::volume::{Dims, SignedVolume};
use proptest::prelude::*;

const ALPHA_BAR_500: f64 = 0.493_843_590_440_637_7;
const ALPHA_BAR_250: f64 = 0.847_012_161_326_904_7;
const ALPHA_BAR_1: f64 = 0.999_958_715_775_178_2;

fn closed_form(t: f64, steps: f64, s: f64) -> f64 {
    let f = |t: f64| ((t / steps + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    f(t) / f(0.0)
}

#[test]
fn frozen_alpha_bar_values() {
    let s = NoiseSchedule::cosine(1000, DEFAULT_S_OFFSET).unwrap();
    assert!((s.alpha_bar(0) - 1.0).abs() < 1e-12);
    assert!((s.alpha_bar(500) - ALPHA_BAR_500).abs() < 1e-10);
    assert!((s.alpha_bar(250) - ALPHA_BAR_250).abs() < 1e-10);
    assert!((s.alpha_bar(1) - ALPHA_BAR_1).abs() < 1e-10);
    for t in [17, 333, 999] {
        assert!((s.alpha_bar(t) - closed_form(t as f64, 1000.0, 0.008)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn schedule_is_strictly_decreasing(steps in 2usize..2000, s in 0.001f64..0.05) {
        let sched = NoiseSchedule::cosine(steps, s).unwrap();
        prop_assert!(sched.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        for k in 1..=steps {
            prop_assert!(sched.beta(k) > 0.0 && sched.beta(k) <= 0.999);
        }
    }

    #[test]
    fn respaced_schedule_keeps_endpoints(n in 1usize..200) {
        let full = NoiseSchedule::cosine(1000, DEFAULT_S_OFFSET).unwrap();
        let r = full.respace(n).unwrap();
        prop_assert_eq!(r.len(), n);
        prop_assert_eq!(r.timestep(n), 1000);
        prop_assert_eq!(r.alpha_bar(0), 1.0);
        for k in 1..=n {
            prop_assert_eq!(r.alpha_bar(k), full.alpha_bar(r.timestep(k)));
        }
    }
}

#[test]
fn corruption_variance_at_mid_schedule() {
    let s = NoiseSchedule::cosine(1000, DEFAULT_S_OFFSET).unwrap();
    let n = 100_000;
    let x0 = SignedVolume::new([1, 1, n], (0..n).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
    let eps = poredit::rng::normal_field(3, "test", 0, n);
    let xt = forward_corrupt(&x0, 500, &eps, &s).unwrap();
    let a = s.alpha_bar(500).sqrt();
    let resid: Vec<f64> = xt.values().iter().zip(x0.values()).map(|(x, x0)| x - a * x0).collect();
    let mean = resid.iter().sum::<f64>() / n as f64;
    let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let want = 1.0 - s.alpha_bar(500);
    assert!((var - want).abs() / want < 0.02, "{var} vs {want}");
}

#[test]
fn ddim_scalar_oracle() {
    let s = NoiseSchedule::cosine(1000, DEFAULT_S_OFFSET).unwrap();
    let (x, x0, k) = (0.3, -0.8, 400);
    let (at, ap) = (s.alpha_bar(k), s.alpha_bar(k - 1));
    let eps = (x - at.sqrt() * x0) / (1.0 - at).sqrt();
    let want = ap.sqrt() * x0 + (1.0 - ap).sqrt() * eps;
    let got = ddim_step(&[x], &[x0], k, 0.0, &s, &[0.0]).unwrap()[0];
    assert!((got - want).abs() < 1e-14);
    // eta = 1 adds eta * sqrt(1 - abar_{k-1}) z
    let got = ddim_step(&[x], &[x0], k, 1.0, &s, &[0.5]).unwrap()[0];
    assert!((got - want - 0.5 * (1.0 - ap).sqrt()).abs() < 1e-14);
}

#[test]
fn deterministic_ddim_retraces_corruption() {
    let s = NoiseSchedule::cosine(1000, DEFAULT_S_OFFSET).unwrap().respace(50).unwrap();
    let n = 64;
    let x0 = SignedVolume::new([4, 4, 4], (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
    let eps = poredit::rng::normal_field(1, "test", 1, n);
    for k in [50, 20, 1] {
        let xt = forward_corrupt(&x0, k, &eps, &s).unwrap();
        let prev = ddim_step(xt.values(), x0.values(), k, 0.0, &s, &[]).unwrap();
        let want = forward_corrupt(&x0, k - 1, &eps, &s).unwrap();
        for (a, b) in prev.iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn posterior_mean_of_clean_signal() {
    let s = NoiseSchedule::cosine(1000, DEFAULT_S_OFFSET).unwrap();
    for k in [2, 100, 500, 900] {
        let x0 = [0.7, -1.0];
        let xt: Vec<f64> = x0.iter().map(|v| s.alpha_bar(k).sqrt() * v).collect();
        let p = ancestral_parts(&xt, &x0, k, &s).unwrap();
        for (m, v) in p.mean.iter().zip(x0) {
            assert!((m - s.alpha_bar(k - 1).sqrt() * v).abs() < 1e-12);
        }
    }
}

struct Shrink(Dims);

impl Denoiser for Shrink {
    fn dims(&self) -> Dims {
        self.0
    }

    fn logits(&self, x: &SignedVolume, t: usize, uncond: bool) -> poredit::Result<Vec<f64>> {
        let b = if uncond { 0.1 } else { 0.0 };
        Ok(x.values().iter().map(|v| 3.0 * v + b - t as f64 * 1e-4).collect())
    }
}

#[test]
fn sampler_is_deterministic_per_seed() {
    let s = NoiseSchedule::cosine(1000, DEFAULT_S_OFFSET).unwrap().respace(20).unwrap();
    let m = Shrink([6, 6, 6]);
    let g = GuidanceSpec::with_scale(2.0);
    for mode in [SampleMode::Ancestral, SampleMode::Ddim { eta: 0.5 }] {
        let a = sample(&m, &s, mode, &g, 11).unwrap();
        let b = sample(&m, &s, mode, &g, 11).unwrap();
        let c = sample(&m, &s, mode, &g, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.field, c.field);
    }
}
