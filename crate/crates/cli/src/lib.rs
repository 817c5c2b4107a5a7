//! Command-line front end: argument parsing, config loading, report writing
//! and the desk reproduction run.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod repro;

pub use config::RunConfig;

/// Bad input detected by the front end (exit code 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "poredit", version, about = "Generate and validate binary porous-media volumes")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "POREDIT_THREADS")]
    pub threads: Option<usize>,

    /// JSON run configuration; omitted keys take desk defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Coherent,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Z,
    Y,
    X,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write thresholded Gaussian random field volumes.
    Synth {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        porosity: Option<f64>,
        #[arg(long)]
        corr_len: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Single output volume.
        #[arg(long, conflicts_with = "out_dir")]
        out: Option<PathBuf>,
        /// Directory for a training set of `data.count` volumes.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train a model on every `.pdtv` volume of a directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate one volume at the model input size.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        porosity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Use the DDIM sampler with this eta instead of ancestral steps.
        #[arg(long)]
        eta: Option<f64>,
        /// Classifier-free guidance scale.
        #[arg(long)]
        guidance: Option<f64>,
        /// Volume whose S2 values feed the optional S2 condition.
        #[arg(long)]
        s2_from: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a larger volume with the sliding-window sampler.
    SampleTiled {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        #[arg(long, value_enum)]
        noise: Option<NoiseArg>,
        #[arg(long)]
        porosity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        s2_from: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Morphological statistics of a volume.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        /// Remove pore clusters below 34 voxels first.
        #[arg(long)]
        clean: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Lattice-Boltzmann permeability.
    Lbm {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        rho_in: Option<f64>,
        #[arg(long)]
        rho_out: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        voxel_size: Option<f64>,
        /// Convergence history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Distance from a generated volume to its nearest reference volume.
    Novelty {
        #[arg(long = "in")]
        input: PathBuf,
        /// Reference volumes or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        reference: Vec<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Join analyze and lbm reports of a directory into a porosity-permeability CSV.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline on the desk configuration and check it.
    ReproDesk {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "repro-desk")]
        out_dir: PathBuf,
        /// Metrics, LBM and sampler checks only; no training.
        #[arg(long)]
        quick: bool,
    },
}

/// Parse, run and map the outcome to an exit code. Failures print one JSON
/// line to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            emit_error("validation", &e.to_string());
            return EXIT_VALIDATION;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == EXIT_VALIDATION { "validation" } else { "runtime" };
            emit_error(kind, &format!("{e:#}"));
            code
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message.trim() });
    eprintln!("{line}");
}

/// 1 for bad input, 2 for failures during computation.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return EXIT_VALIDATION;
        }
        if let Some(pe) = cause.downcast_ref::<poredit::Error>() {
            if pe.is_validation() {
                return EXIT_VALIDATION;
            }
            if let poredit::Error::Io(io) = pe {
                if io.kind() == std::io::ErrorKind::NotFound {
                    return EXIT_VALIDATION;
                }
            }
            return EXIT_RUNTIME;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}

pub fn run(cli: Cli) -> anyhow::Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Invalid("--threads must be at least 1".into()).into());
        }
        // A second call in the same process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    commands::dispatch(cli.command, cfg)
}
