//! End-to-end desk run: synthesise a training set, train, sample, tile,
//! analyse and simulate, then check every acceptance gate.

use std::f64::consts::{FRAC_PI_2, LN_2};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Result;
use poredit::diffusion::NoiseSchedule;
use poredit::lbm::{channel, channel_permeability, percolates, run_permeability, Axis, LbmConfig};
use poredit::metrics;
use poredit::network::PoreDiT;
use poredit::tensor::{Graph, Tensor};
use poredit::training::{bce_loss, dice_loss, physics_loss, LossTarget};
use poredit::volume::{synth_grf, BinaryVolume, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::commands::{
    self, analyze_cmd, generate, generate_tiled, lbm_report, load_checkpoint, read_volume, write_json, write_volume,
    SampleReport,
};
use crate::config::RunConfig;

/// Porosity the generated samples are conditioned on.
pub const DESK_PHI: f64 = 0.25;
pub const DESK_SAMPLES: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub criterion: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(criterion: &str, name: &str, passed: bool, detail: String) -> Self {
        Self {
            criterion: criterion.into(),
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeskSummary {
    pub command: String,
    pub seed: u64,
    pub quick: bool,
    pub checks: Vec<Check>,
    pub samples: Vec<SampleReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tiled: Option<SampleReport>,
}

impl DeskSummary {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check<'a>(&'a self, criterion: &'a str) -> impl Iterator<Item = &'a Check> + 'a {
        self.checks.iter().filter(move |c| c.criterion == criterion)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(4);
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{:>3}  {:<w$}  {status}  {}", c.criterion, c.name, c.detail);
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(s, "{} checks, {failed} failed", self.checks.len());
        s
    }
}

pub fn repro_desk(cfg: &RunConfig, seed: u64, out_dir: &Path, quick: bool) -> Result<DeskSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut checks = Vec::new();
    checks.extend(schedule_checks(cfg)?);
    checks.extend(metric_checks());
    checks.extend(loss_checks(cfg)?);
    checks.extend(lbm_checks(cfg, seed)?);
    let mut summary = DeskSummary {
        command: "repro-desk".into(),
        seed,
        quick,
        checks,
        samples: Vec::new(),
        tiled: None,
    };
    if !quick {
        pipeline(cfg, seed, out_dir, &mut summary)?;
    }
    Ok(summary)
}

fn schedule_checks(cfg: &RunConfig) -> Result<Vec<Check>> {
    let t = cfg.train.diffusion_steps;
    let s = cfg.train.s_offset;
    let sched = NoiseSchedule::cosine(t, s)?;
    let ab = sched.alpha_bars();
    let f = |k: f64| ((k / t as f64 + s) / (1.0 + s) * FRAC_PI_2).cos().powi(2);
    let mid = t / 2;
    let closed = f(mid as f64) / f(0.0);
    let err = (sched.alpha_bar(mid) - closed).abs();
    let monotone = ab.windows(2).all(|w| w[1] < w[0]);
    let ok = (sched.alpha_bar(0) - 1.0).abs() <= 1e-12 && monotone && err <= 1e-10;
    Ok(vec![Check::new(
        "1",
        "schedule endpoints and midpoint",
        ok,
        format!("alpha_bar[{mid}] = {:.12}, |err| = {err:.1e}", sched.alpha_bar(mid)),
    )])
}

fn metric_checks() -> Vec<Check> {
    let single = BinaryVolume::from_fn([3, 3, 3], |z, y, x| (z, y, x) == (1, 1, 1));
    let hollow = BinaryVolume::from_fn([3, 3, 3], |z, y, x| (z, y, x) != (1, 1, 1));
    let ring = BinaryVolume::from_fn([1, 3, 3], |_, y, x| (y, x) != (1, 1));
    let chi = [&single, &hollow, &ring].map(metrics::euler_characteristic);
    // a 33-voxel and a 34-voxel rod, far apart
    let rods = BinaryVolume::from_fn([4, 4, 40], |z, y, x| (z == 0 && y == 0 && x < 33) || (z == 3 && y == 3 && x < 34));
    let (cleaned, removed) = metrics::clean_isolated(&rods, metrics::CLEAN_MIN_VOXELS);
    vec![
        Check::new("6", "Euler characteristic shapes", chi == [1, 2, 0], format!("chi = {chi:?}")),
        Check::new(
            "6",
            "small-cluster cleaning threshold",
            removed == 33 && cleaned.pore_count() == 34,
            format!("removed {removed}, kept {}", cleaned.pore_count()),
        ),
    ]
}

fn loss_checks(cfg: &RunConfig) -> Result<Vec<Check>> {
    let g_vol = synth_grf(&SynthSpec {
        size: 16,
        porosity: 0.3,
        corr_len: 2.0,
        seed: 0,
    })?;
    let target = LossTarget::from_volume(&g_vol, &[2, 4, 8])?;
    let shape = g_vol.dims().to_vec();
    let mut g = Graph::new();
    let exact = g.constant(Tensor::new(shape.clone(), g_vol.to_indicator())?);
    let half = g.constant(Tensor::full(&shape, 0.5));
    let dice = dice_loss(&mut g, exact, &g_vol)?;
    let bce = bce_loss(&mut g, half, &g_vol)?;
    let phys = physics_loss(&mut g, exact, &target, cfg.loss.lambda_s2)?;
    let v = |x| g.value(x).item().expect("scalar");
    let (dice, bce, phys) = (v(dice), v(bce), v(phys));
    let w = &cfg.loss;
    let ramp: Vec<f64> = (0..=w.warmup_epochs + 1).map(|e| w.physics_weight(e)).collect();
    let linear = ramp
        .iter()
        .enumerate()
        .all(|(e, &x)| x == w.lambda_phy * (e as f64 / w.warmup_epochs.max(1) as f64).min(1.0));
    Ok(vec![
        Check::new(
            "9",
            "loss identities",
            dice.abs() < 1e-12 && (bce - LN_2).abs() < 1e-12 && phys.abs() < 1e-12,
            format!("dice {dice:.1e}, bce - ln2 {:.1e}, phys {phys:.1e}", bce - LN_2),
        ),
        Check::new("9", "physics warm-up ramp", linear, format!("weights {ramp:?}")),
    ])
}

fn lbm_checks(cfg: &RunConfig, seed: u64) -> Result<Vec<Check>> {
    let h = 20;
    let c = LbmConfig {
        axis: Axis::X,
        tol: 1e-9,
        ..LbmConfig::default()
    };
    let r = run_permeability(&channel(h, 16, 1), &c)?;
    let want = channel_permeability(h);
    let rel = (r.k_lattice - want).abs() / want;
    let mut out = vec![Check::new(
        "7",
        "channel permeability",
        r.converged && rel < 0.02,
        format!("K = {:.4}, analytic {want:.4}, rel {rel:.4}", r.k_lattice),
    )];
    // first percolating field of a fixed seed sequence
    let axis = cfg.lbm.axis.index();
    let mut found = None;
    for k in 0..32u64 {
        let v = synth_grf(&SynthSpec {
            size: cfg.data.size,
            porosity: cfg.data.porosity,
            corr_len: cfg.data.corr_len,
            seed: seed.wrapping_mul(7919).wrapping_add(k),
        })?;
        if percolates(&v, axis) {
            found = Some(v);
            break;
        }
    }
    let (ok, detail) = match found {
        Some(v) => {
            let r = run_permeability(&v, &cfg.lbm)?;
            (r.converged, format!("K = {:.4e} after {} steps", r.k_lattice, r.steps))
        }
        None => (false, "no percolating synthetic volume".to_string()),
    };
    out.push(Check::new("7", "LBM converges on a synthetic volume", ok, detail));
    Ok(out)
}

/// Per-lag mean and population standard deviation of radial S2 curves.
fn s2_envelope(curves: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = curves.iter().map(Vec::len).min().unwrap_or(0);
    let m = curves.len() as f64;
    let mean: Vec<f64> = (0..n).map(|r| curves.iter().map(|c| c[r]).sum::<f64>() / m).collect();
    let std = (0..n)
        .map(|r| (curves.iter().map(|c| (c[r] - mean[r]).powi(2)).sum::<f64>() / m).sqrt())
        .collect();
    (mean, std)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn pipeline(cfg: &RunConfig, seed: u64, out_dir: &Path, summary: &mut DeskSummary) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    let data_dir = out_dir.join("data");
    let synth = commands::synth_set(&cfg, seed.wrapping_mul(1000), &data_dir)?;
    write_json(&synth, &out_dir.join("synth.json"))?;

    let ckpt_path = out_dir.join("model.pdtc");
    let train = commands::train_cmd(&cfg, &data_dir, &ckpt_path, Some(&out_dir.join("train.csv")))?;
    write_json(&train, &out_dir.join("train.json"))?;
    let ck = load_checkpoint(&ckpt_path)?;
    log::info!(
        "trained {} parameters, loss {:.4} -> {:.4}",
        PoreDiT::param_count(&ck.model),
        train.head_loss,
        train.tail_loss
    );

    let sample_dir = out_dir.join("samples");
    let report_dir = out_dir.join("reports");
    fs::create_dir_all(&report_dir)?;
    let mut samples = Vec::new();
    let mut vols = Vec::new();
    for i in 0..DESK_SAMPLES {
        let s_seed = seed + i as u64;
        let path = sample_dir.join(format!("sample_{i:02}.pdtv"));
        let s = generate(&cfg, &ck, DESK_PHI, s_seed, None)?;
        write_volume(&s.volume, &path)?;
        let r = commands::sample_report(&cfg, &ckpt_path, &path, DESK_PHI, s_seed, &s);
        write_json(&r, &report_dir.join(format!("sample_{i:02}.sample.json")))?;
        write_json(&analyze_cmd(&path, false)?, &report_dir.join(format!("sample_{i:02}.analyze.json")))?;
        log::info!("sample {i}: porosity {:.4}", r.porosity);
        samples.push(r);
        vols.push(s.volume);
    }

    // (a) porosity control
    let hits = samples.iter().filter(|s| (s.porosity - DESK_PHI).abs() <= 0.03).count();
    let phis: Vec<String> = samples.iter().map(|s| format!("{:.3}", s.porosity)).collect();
    summary.checks.push(Check::new(
        "8a",
        "porosity within 0.03 of the condition",
        hits >= 8,
        format!("{hits}/{DESK_SAMPLES} hit; porosities [{}]", phis.join(", ")),
    ));

    // (b) mean S2 inside the training-set envelope
    let train_paths = commands::volume_paths(&data_dir)?;
    let train_vols = train_paths.iter().map(|p| read_volume(p)).collect::<Result<Vec<_>>>()?;
    let (gt_mean, gt_std) = s2_envelope(&train_vols.iter().map(metrics::s2_radial).collect::<Vec<_>>());
    let (gen_mean, _) = s2_envelope(&vols.iter().map(metrics::s2_radial).collect::<Vec<_>>());
    let n = gt_mean.len().min(gen_mean.len());
    let worst = (0..n)
        .map(|r| (gen_mean[r] - gt_mean[r]).abs() / gt_std[r].max(1e-12))
        .fold(0.0f64, f64::max);
    summary.checks.push(Check::new(
        "8b",
        "mean S2 within 3 ensemble std",
        n > 0 && worst <= 3.0,
        format!("worst lag deviation {worst:.2} std over {n} lags"),
    ));

    // (c) cross-scale connectivity
    let tiled_path = out_dir.join("tiled.pdtv");
    let (ts, tiles) = generate_tiled(&cfg, &ck, DESK_PHI, seed, None)?;
    write_volume(&ts.volume, &tiled_path)?;
    let mut tr = commands::sample_report(&cfg, &ckpt_path, &tiled_path, DESK_PHI, seed, &ts);
    tr.command = "sample-tiled".into();
    tr.tiling = Some(commands::TilingInfo {
        tile: cfg.tiling.tile,
        overlap: cfg.tiling.overlap,
        noise: cfg.tiling.noise,
        tiles,
    });
    write_json(&tr, &out_dir.join("tiled.json"))?;
    let mono_conn = mean(samples.iter().map(|s| s.largest_cluster_fraction));
    let mono_phi = mean(samples.iter().map(|s| s.porosity));
    summary.checks.push(Check::new(
        "8c",
        "tiled connectivity near monolithic mean",
        (tr.largest_cluster_fraction - mono_conn).abs() <= 0.05,
        format!(
            "tiled {:.4} vs monolithic {mono_conn:.4}",
            tr.largest_cluster_fraction
        ),
    ));
    summary.checks.push(Check::new(
        "8c",
        "tiled porosity near condition and monolithic mean",
        (tr.porosity - DESK_PHI).abs() <= 0.04 && (tr.porosity - mono_phi).abs() <= 0.02,
        format!("tiled {:.4}, monolithic mean {mono_phi:.4}", tr.porosity),
    ));
    summary.tiled = Some(tr);

    // (d) novelty against the training set, with a planted copy
    let dmins = vols
        .iter()
        .map(|v| metrics::novelty_dmin(v, &train_vols))
        .collect::<poredit::Result<Vec<_>>>()?;
    let planted = metrics::novelty_dmin(&train_vols[0], &train_vols)?;
    let min_d = dmins.iter().copied().fold(f64::INFINITY, f64::min);
    summary.checks.push(Check::new(
        "8d",
        "novelty: generated > 0, planted copy = 0",
        min_d > 0.0 && planted == 0.0,
        format!("min generated D_min {min_d:.4}, planted {planted}"),
    ));

    // permeability of the first percolating sample feeds the porosity-permeability table
    let axis = cfg.lbm.axis.index();
    match vols.iter().position(|v| percolates(v, axis)) {
        Some(i) => {
            let path = sample_dir.join(format!("sample_{i:02}.pdtv"));
            let r = run_permeability(&vols[i], &cfg.lbm)?;
            write_json(&lbm_report(&path, &cfg, &vols[i], &r), &report_dir.join(format!("sample_{i:02}.lbm.json")))?;
            summary.checks.push(Check::new(
                "7",
                "LBM converges on a generated sample",
                r.converged,
                format!("sample {i}: K = {:.4e} after {} steps", r.k_lattice, r.steps),
            ));
        }
        None => log::warn!("no generated sample percolates along {:?}", cfg.lbm.axis),
    }
    fs::write(out_dir.join("phi_k.csv"), commands::report_cmd(&report_dir)?)?;

    summary.samples = samples;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_of_identical_curves() {
        let (m, s) = s2_envelope(&[vec![0.3, 0.1], vec![0.3, 0.1]]);
        assert_eq!(m, vec![0.3, 0.1]);
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn table_lists_every_check() {
        let s = DeskSummary {
            command: "repro-desk".into(),
            seed: 1,
            quick: true,
            checks: vec![
                Check::new("1", "a", true, "x".into()),
                Check::new("2", "b", false, "y".into()),
            ],
            samples: Vec::new(),
            tiled: None,
        };
        let t = s.table();
        assert!(t.contains("PASS") && t.contains("FAIL"));
        assert!(!s.all_passed());
    }
}
