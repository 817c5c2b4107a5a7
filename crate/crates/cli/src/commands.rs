use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use poredit::diffusion::{sample, GuidanceSpec, NoiseSchedule, SampleMode, SampleOutput};
use poredit::lbm::{run_permeability, Axis, PermeabilityResult};
use poredit::metrics::{self, MetricsReport};
use poredit::network::{Checkpoint, Conditioned, PoreDiT};
use poredit::tiling::{plan_tiles, sample_tiled, NoiseMode};
use poredit::training::{train, write_epoch_csv, LossTarget};
use poredit::volume::{synth_grf, BinaryVolume, Dims, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{repro, AxisArg, Command, Invalid, NoiseArg};

pub fn dispatch(cmd: Command, mut cfg: RunConfig) -> Result<i32> {
    match cmd {
        Command::Synth {
            size,
            porosity,
            corr_len,
            seed,
            out,
            out_dir,
            report,
        } => {
            if let Some(s) = size {
                cfg.data.size = s;
            }
            if let Some(p) = porosity {
                cfg.data.porosity = p;
            }
            if let Some(c) = corr_len {
                cfg.data.corr_len = c;
            }
            let r = match (out, out_dir) {
                (Some(path), None) => synth_one(&cfg, seed, &path)?,
                (None, Some(dir)) => synth_set(&cfg, seed, &dir)?,
                _ => return Err(Invalid("synth needs --out or --out-dir".into()).into()),
            };
            emit(&r, report.as_deref())?;
        }
        Command::Train {
            data,
            out,
            steps,
            seed,
            log,
            report,
        } => {
            if let Some(s) = steps {
                cfg.train.max_steps = Some(s);
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let r = train_cmd(&cfg, &data, &out, log.as_deref())?;
            emit(&r, report.as_deref())?;
        }
        Command::Sample {
            ckpt,
            porosity,
            seed,
            out,
            steps,
            eta,
            guidance,
            s2_from,
            report,
        } => {
            apply_sampler_flags(&mut cfg, steps, eta, guidance)?;
            let r = sample_cmd(&cfg, &ckpt, porosity, seed, &out, s2_from.as_deref())?;
            emit(&r, report.as_deref())?;
        }
        Command::SampleTiled {
            ckpt,
            size,
            tile,
            overlap,
            noise,
            porosity,
            seed,
            out,
            steps,
            eta,
            guidance,
            s2_from,
            report,
        } => {
            apply_sampler_flags(&mut cfg, steps, eta, guidance)?;
            let t = &mut cfg.tiling;
            if let Some(v) = size {
                t.size = v;
            }
            if let Some(v) = tile {
                t.tile = v;
            }
            if let Some(v) = overlap {
                t.overlap = v;
            }
            if let Some(n) = noise {
                t.noise = match n {
                    NoiseArg::Coherent => NoiseMode::Coherent,
                    NoiseArg::Independent => NoiseMode::Independent,
                };
            }
            let r = sample_tiled_cmd(&cfg, &ckpt, porosity, seed, &out, s2_from.as_deref())?;
            emit(&r, report.as_deref())?;
        }
        Command::Analyze { input, clean, report } => {
            let r = analyze_cmd(&input, clean)?;
            emit(&r, report.as_deref())?;
        }
        Command::Lbm {
            input,
            axis,
            tau,
            rho_in,
            rho_out,
            tol,
            max_steps,
            voxel_size,
            history,
            report,
        } => {
            let l = &mut cfg.lbm;
            if let Some(a) = axis {
                l.axis = match a {
                    AxisArg::Z => Axis::Z,
                    AxisArg::Y => Axis::Y,
                    AxisArg::X => Axis::X,
                };
            }
            if let Some(v) = tau {
                l.tau = v;
            }
            if let Some(v) = rho_in {
                l.rho_in = v;
            }
            if let Some(v) = rho_out {
                l.rho_out = v;
            }
            if let Some(v) = tol {
                l.tol = v;
            }
            if let Some(v) = max_steps {
                l.max_steps = v;
            }
            if voxel_size.is_some() {
                l.voxel_size = voxel_size;
            }
            let r = lbm_cmd(&cfg, &input, history.as_deref())?;
            emit(&r, report.as_deref())?;
        }
        Command::Novelty {
            input,
            reference,
            report,
        } => {
            let r = novelty_cmd(&input, &reference)?;
            emit(&r, report.as_deref())?;
        }
        Command::Report { dir, out } => {
            let csv = report_cmd(&dir)?;
            match out {
                Some(p) => fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::ReproDesk { seed, out_dir, quick } => {
            let summary = repro::repro_desk(&cfg, seed, &out_dir, quick)?;
            print!("{}", summary.table());
            let path = out_dir.join("summary.json");
            write_json(&summary, &path)?;
            if !summary.all_passed() {
                let failed: Vec<String> = summary
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| format!("{} {}", c.criterion, c.name))
                    .collect();
                anyhow::bail!("failed checks: {}", failed.join("; "));
            }
        }
    }
    Ok(0)
}

fn apply_sampler_flags(cfg: &mut RunConfig, steps: Option<usize>, eta: Option<f64>, guidance: Option<f64>) -> Result<()> {
    let s = &mut cfg.sampler;
    if let Some(n) = steps {
        s.steps = n;
    }
    if let Some(e) = eta {
        s.mode = SampleMode::Ddim { eta: e };
    }
    if let Some(g) = guidance {
        s.guidance = GuidanceSpec::with_scale(g);
    }
    if s.steps == 0 {
        return Err(Invalid("--steps must be at least 1".into()).into());
    }
    if let SampleMode::Ddim { eta } = s.mode {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Invalid(format!("eta {eta} must lie in [0, 1]")).into());
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => write_json(value, p),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Invalid(format!("file not found: {}", path.display())).into());
    }
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<BinaryVolume> {
    require(path)?;
    BinaryVolume::read(path).with_context(|| format!("reading volume {}", path.display()))
}

pub fn write_volume(v: &BinaryVolume, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    v.write(path).with_context(|| format!("writing volume {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require(path)?;
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// `.pdtv` files of a directory in name order, or the path itself when it
/// is a file.
pub fn volume_paths(path: &Path) -> Result<Vec<PathBuf>> {
    require(path)?;
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pdtv"))
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthEntry {
    pub path: String,
    pub seed: u64,
    pub porosity_target: f64,
    pub porosity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthReport {
    pub command: String,
    pub size: usize,
    pub corr_len: f64,
    pub volumes: Vec<SynthEntry>,
}

fn synth_entry(cfg: &RunConfig, seed: u64, porosity: f64, path: &Path) -> Result<SynthEntry> {
    let v = synth_grf(&SynthSpec {
        size: cfg.data.size,
        porosity,
        corr_len: cfg.data.corr_len,
        seed,
    })?;
    write_volume(&v, path)?;
    Ok(SynthEntry {
        path: path.display().to_string(),
        seed,
        porosity_target: porosity,
        porosity: v.porosity(),
    })
}

pub fn synth_one(cfg: &RunConfig, seed: u64, path: &Path) -> Result<SynthReport> {
    let e = synth_entry(cfg, seed, cfg.data.porosity, path)?;
    Ok(SynthReport {
        command: "synth".into(),
        size: cfg.data.size,
        corr_len: cfg.data.corr_len,
        volumes: vec![e],
    })
}

/// `data.count` volumes named `vol_000.pdtv`, ... with seeds `seed + i`.
pub fn synth_set(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<SynthReport> {
    fs::create_dir_all(dir)?;
    let volumes = (0..cfg.data.count)
        .map(|i| {
            let p = dir.join(format!("vol_{i:03}.pdtv"));
            synth_entry(cfg, seed + i as u64, cfg.data.porosity_of(i), &p)
        })
        .collect::<Result<_>>()?;
    Ok(SynthReport {
        command: "synth".into(),
        size: cfg.data.size,
        corr_len: cfg.data.corr_len,
        volumes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub command: String,
    pub checkpoint: String,
    pub volumes: usize,
    pub param_count: usize,
    pub steps: usize,
    pub seed: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Mean loss over the first and last tenth of the steps.
    pub head_loss: f64,
    pub tail_loss: f64,
    pub phi_mean: f64,
    pub phi_std: f64,
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, log: Option<&Path>) -> Result<TrainReport> {
    let paths = volume_paths(data)?;
    if paths.is_empty() {
        return Err(Invalid(format!("no .pdtv volumes in {}", data.display())).into());
    }
    let vols = paths.iter().map(|p| read_volume(p)).collect::<Result<Vec<_>>>()?;
    let model = PoreDiT::new(cfg.model.clone(), cfg.train.seed)?;
    let param_count = model.param_count();
    let outcome = train(&vols, model, &cfg.train, &cfg.loss, |step, loss| {
        log::info!("step {step} loss {loss:.5}");
    })?;
    let ck = &outcome.checkpoint;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ck.save(out).with_context(|| format!("writing checkpoint {}", out.display()))?;
    if let Some(p) = log {
        let mut f = fs::File::create(p).with_context(|| format!("writing {}", p.display()))?;
        write_epoch_csv(&outcome.epochs, &mut f)?;
        f.flush()?;
    }
    let l = &outcome.step_losses;
    let tenth = (l.len() / 10).max(1);
    let mean = |s: &[f64]| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
    Ok(TrainReport {
        command: "train".into(),
        checkpoint: out.display().to_string(),
        volumes: vols.len(),
        param_count,
        steps: l.len(),
        seed: cfg.train.seed,
        first_loss: l.first().copied().unwrap_or(f64::NAN),
        final_loss: l.last().copied().unwrap_or(f64::NAN),
        head_loss: mean(&l[..tenth.min(l.len())]),
        tail_loss: mean(&l[l.len().saturating_sub(tenth)..]),
        phi_mean: ck.meta.cond_stats.phi_mean,
        phi_std: ck.meta.cond_stats.phi_std,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleReport {
    pub command: String,
    pub checkpoint: String,
    pub out: String,
    pub dims: Dims,
    pub seed: u64,
    pub steps: usize,
    pub mode: SampleMode,
    pub guidance_scale: f64,
    pub porosity_target: f64,
    pub porosity: f64,
    pub threshold: f64,
    pub largest_cluster_fraction: f64,
    /// Present for tiled runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tiling: Option<TilingInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TilingInfo {
    pub tile: usize,
    pub overlap: usize,
    pub noise: NoiseMode,
    pub tiles: usize,
}

fn schedule(ck: &Checkpoint, steps: usize) -> Result<NoiseSchedule> {
    let full = NoiseSchedule::cosine(ck.meta.diffusion_steps, ck.meta.s_offset)?;
    if steps > full.len() {
        return Err(Invalid(format!("{steps} sampler steps exceed the {} training steps", full.len())).into());
    }
    Ok(full.respace(steps)?)
}

fn s2_condition(ck: &Checkpoint, s2_from: Option<&Path>) -> Result<Option<Vec<f64>>> {
    let want = ck.model.config().s2_features;
    match (want, s2_from) {
        (0, _) => Ok(None),
        (_, None) => Err(Invalid("model takes an S2 condition; pass --s2-from".into()).into()),
        (_, Some(p)) => {
            let v = read_volume(p)?;
            Ok(Some(LossTarget::from_volume(&v, &ck.meta.s2_lags)?.s2.iter().map(|&(_, s)| s).collect()))
        }
    }
}

fn check_porosity(phi: f64) -> Result<()> {
    if !(phi > 0.0 && phi < 1.0) {
        return Err(Invalid(format!("porosity {phi} must lie in (0, 1)")).into());
    }
    Ok(())
}

/// Monolithic sample at the model input size.
pub fn generate(cfg: &RunConfig, ck: &Checkpoint, phi: f64, seed: u64, s2: Option<&[f64]>) -> Result<SampleOutput> {
    let sched = schedule(ck, cfg.sampler.steps)?;
    let mut m = Conditioned::new(&ck.model, ck.meta.cond_stats.normalize(phi));
    m.s2 = s2;
    Ok(sample(&m, &sched, cfg.sampler.mode, &cfg.sampler.guidance, seed)?)
}

/// Sliding-window sample of edge `cfg.tiling.size`.
pub fn generate_tiled(cfg: &RunConfig, ck: &Checkpoint, phi: f64, seed: u64, s2: Option<&[f64]>) -> Result<(SampleOutput, usize)> {
    let t = &cfg.tiling;
    let sched = schedule(ck, cfg.sampler.steps)?;
    let plan = plan_tiles([t.size; 3], t.tile, t.overlap)?;
    let mut m = Conditioned::new(&ck.model, ck.meta.cond_stats.normalize(phi));
    m.s2 = s2;
    let out = sample_tiled(&m, &plan, t.noise, &sched, cfg.sampler.mode, &cfg.sampler.guidance, seed)?;
    Ok((out, plan.len()))
}

pub fn sample_report(cfg: &RunConfig, ckpt: &Path, out: &Path, phi: f64, seed: u64, s: &SampleOutput) -> SampleReport {
    SampleReport {
        command: "sample".into(),
        checkpoint: ckpt.display().to_string(),
        out: out.display().to_string(),
        dims: s.volume.dims(),
        seed,
        steps: cfg.sampler.steps,
        mode: cfg.sampler.mode,
        guidance_scale: cfg.sampler.guidance.effective_scale(),
        porosity_target: phi,
        porosity: s.volume.porosity(),
        threshold: s.threshold,
        largest_cluster_fraction: metrics::connectivity_fraction(&s.volume),
        tiling: None,
    }
}

pub fn sample_cmd(cfg: &RunConfig, ckpt: &Path, phi: f64, seed: u64, out: &Path, s2_from: Option<&Path>) -> Result<SampleReport> {
    check_porosity(phi)?;
    let ck = load_checkpoint(ckpt)?;
    let s2 = s2_condition(&ck, s2_from)?;
    let s = generate(cfg, &ck, phi, seed, s2.as_deref())?;
    write_volume(&s.volume, out)?;
    Ok(sample_report(cfg, ckpt, out, phi, seed, &s))
}

pub fn sample_tiled_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    phi: f64,
    seed: u64,
    out: &Path,
    s2_from: Option<&Path>,
) -> Result<SampleReport> {
    check_porosity(phi)?;
    let ck = load_checkpoint(ckpt)?;
    let t = &cfg.tiling;
    if t.tile != ck.model.config().input_size {
        return Err(Invalid(format!(
            "tile {} must equal the model input {}",
            t.tile,
            ck.model.config().input_size
        ))
        .into());
    }
    let s2 = s2_condition(&ck, s2_from)?;
    let (s, tiles) = generate_tiled(cfg, &ck, phi, seed, s2.as_deref())?;
    write_volume(&s.volume, out)?;
    let mut r = sample_report(cfg, ckpt, out, phi, seed, &s);
    r.command = "sample-tiled".into();
    r.tiling = Some(TilingInfo {
        tile: t.tile,
        overlap: t.overlap,
        noise: t.noise,
        tiles,
    });
    Ok(r)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub command: String,
    pub input: String,
    pub clean: bool,
    pub metrics: MetricsReport,
}

pub fn analyze_cmd(input: &Path, clean: bool) -> Result<AnalyzeReport> {
    let v = read_volume(input)?;
    Ok(AnalyzeReport {
        command: "analyze".into(),
        input: input.display().to_string(),
        clean,
        metrics: metrics::analyze(&v, clean),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LbmReport {
    pub command: String,
    pub input: String,
    pub axis: Axis,
    pub tau: f64,
    pub rho_in: f64,
    pub rho_out: f64,
    pub tol: f64,
    pub porosity: f64,
    pub k_lattice: f64,
    pub k_physical: Option<f64>,
    pub mean_velocity: f64,
    pub steps: usize,
    pub converged: bool,
}

pub fn lbm_report(input: &Path, cfg: &RunConfig, v: &BinaryVolume, r: &PermeabilityResult) -> LbmReport {
    let l = &cfg.lbm;
    LbmReport {
        command: "lbm".into(),
        input: input.display().to_string(),
        axis: l.axis,
        tau: l.tau,
        rho_in: l.rho_in,
        rho_out: l.rho_out,
        tol: l.tol,
        porosity: v.porosity(),
        k_lattice: r.k_lattice,
        k_physical: r.k_physical,
        mean_velocity: r.mean_velocity,
        steps: r.steps,
        converged: r.converged,
    }
}

pub fn lbm_cmd(cfg: &RunConfig, input: &Path, history: Option<&Path>) -> Result<LbmReport> {
    cfg.lbm.validate()?;
    let v = read_volume(input)?;
    let r = run_permeability(&v, &cfg.lbm)?;
    if let Some(p) = history {
        let mut text = String::from("step,rel_change\n");
        for (s, rel) in &r.history {
            text.push_str(&format!("{s},{rel:e}\n"));
        }
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(lbm_report(input, cfg, &v, &r))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub command: String,
    pub input: String,
    pub references: usize,
    pub d_min: f64,
}

pub fn novelty_cmd(input: &Path, reference: &[PathBuf]) -> Result<NoveltyReport> {
    let v = read_volume(input)?;
    let mut refs = Vec::new();
    for r in reference {
        for p in volume_paths(r)? {
            refs.push(read_volume(&p)?);
        }
    }
    if refs.is_empty() {
        return Err(Invalid("no reference volumes found".into()).into());
    }
    Ok(NoveltyReport {
        command: "novelty".into(),
        input: input.display().to_string(),
        references: refs.len(),
        d_min: metrics::novelty_dmin(&v, &refs)?,
    })
}

#[derive(Debug, Default)]
struct Row {
    porosity: Option<f64>,
    k_lattice: Option<f64>,
    k_physical: Option<f64>,
    converged: Option<bool>,
}

/// CSV `volume,porosity,k_lattice,k_physical,converged` joining the analyze
/// and lbm reports of `dir` by input volume.
pub fn report_cmd(dir: &Path) -> Result<String> {
    require(dir)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut rows: BTreeMap<String, Row> = BTreeMap::new();
    for p in paths {
        let text = fs::read_to_string(&p)?;
        let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else {
            log::warn!("skipping {}: not JSON", p.display());
            continue;
        };
        let Some(input) = v.get("input").and_then(|x| x.as_str()) else { continue };
        match v.get("command").and_then(|c| c.as_str()) {
            Some("analyze") => {
                rows.entry(input.to_string()).or_default().porosity = v["metrics"]["porosity"].as_f64();
            }
            Some("lbm") => {
                let row = rows.entry(input.to_string()).or_default();
                row.k_lattice = v["k_lattice"].as_f64();
                row.k_physical = v["k_physical"].as_f64();
                row.converged = v["converged"].as_bool();
                if row.porosity.is_none() {
                    row.porosity = v["porosity"].as_f64();
                }
            }
            _ => {}
        }
    }
    let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
    let mut csv = String::from("volume,porosity,k_lattice,k_physical,converged\n");
    for (name, r) in rows {
        csv.push_str(&format!(
            "{name},{},{},{},{}\n",
            r.porosity.map(|v| v.to_string()).unwrap_or_default(),
            opt(r.k_lattice),
            opt(r.k_physical),
            r.converged.map(|b| b.to_string()).unwrap_or_default()
        ));
    }
    Ok(csv)
}
