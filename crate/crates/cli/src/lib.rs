//! Experiment orchestration for `anisoperc`: manifests, subcommands and
//! result files.

pub mod checks;
pub mod commands;
pub mod manifest;
pub mod output;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::commands::Report;
use crate::manifest::{ExperimentManifest, OUT_ENV, DEFAULT_OUT};
use crate::output::{OutputDir, TOOL};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid manifest field `{field}`: {message}")]
    Manifest { field: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] anisoperc::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Lattice and parameter validation errors name the manifest field.
    pub fn from_core(section: &str, e: anisoperc::Error) -> Self {
        match e {
            anisoperc::Error::InvalidSpec { field, reason } => CliError::Manifest {
                field: format!("{section}.{field}"),
                message: reason,
            },
            other => CliError::Core(other),
        }
    }

    /// 2 for usage and manifest errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Manifest { .. } | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Flags override manifest fields. The output directory resolves as
/// `--out`, then `[output] dir`, then `$ANISOPERC_OUT`, then
/// `./anisoperc-out`.
#[derive(Debug, Parser)]
#[command(name = "anisoperc", version, about = "Anisotropic bond percolation experiments")]
pub struct Cli {
    /// Experiment manifest (TOML).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replica worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write per-step exploration traces.
    #[arg(long, global = true)]
    pub trace: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample configurations and tabulate cluster statistics.
    Sample,
    /// Run coupled explorations and verify their traces.
    Explore,
    /// Estimate q_c(p) over the p grid and compare with the bound line.
    QcScan,
    /// Fit the crossover exponent to a curve CSV or a fresh scan.
    Fit {
        /// Curve CSV with columns p, qc and optionally qc_lo, qc_hi.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Critical point; defaults to the manifest or the literature value.
        #[arg(long)]
        pc: Option<f64>,
    },
    /// Deterministic arithmetic checks.
    Check {
        /// Use this p_c for every d instead of the literature values.
        #[arg(long)]
        pc: Option<f64>,
    },
    /// Compare plain and multigraph cluster laws.
    Equivalence,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Explore => "explore",
            Command::QcScan => "qc-scan",
            Command::Fit { .. } => "fit",
            Command::Check { .. } => "check",
            Command::Equivalence => "equivalence",
        }
    }
}

fn load_manifest(cli: &Cli) -> Result<Option<ExperimentManifest>, CliError> {
    let Some(path) = &cli.manifest else {
        return Ok(None);
    };
    let mut m = ExperimentManifest::load(path)?;
    if let Some(seed) = cli.seed {
        m.seeds.master = seed;
    }
    if let Some(out) = &cli.out {
        m.output.dir = Some(out.clone());
    }
    m.output.trace |= cli.trace;
    Ok(Some(m))
}

fn require(m: Option<ExperimentManifest>, command: &str) -> Result<ExperimentManifest, CliError> {
    m.ok_or_else(|| CliError::Usage(format!("`{command}` needs --manifest")))
}

/// Run one command on a worker pool of the requested size.
pub fn run(cli: &Cli) -> Result<(Report, OutputDir), CliError> {
    let manifest = load_manifest(cli)?;
    let out_dir = match (&cli.out, &manifest) {
        (Some(dir), _) => dir.clone(),
        (None, Some(m)) => m.out_dir(),
        (None, None) => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
    };
    let mut out = OutputDir::create(&out_dir)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start workers: {e}")))?;

    let start = Instant::now();
    let name = cli.command.name();
    let report = pool.install(|| -> Result<Report, CliError> {
        if let Some(m) = &manifest {
            let body = format!("# {TOOL}, manifest sha256 {}\n{}", m.hash(), {
                let mut bare = m.clone();
                bare.output = Default::default();
                bare.to_toml()
            });
            out.text("manifest.toml", &body)?;
        }
        match &cli.command {
            Command::Sample => commands::run_sample(&require(manifest.clone(), name)?, &mut out),
            Command::Explore => commands::run_explore(&require(manifest.clone(), name)?, &mut out),
            Command::QcScan => commands::run_qc_scan(&require(manifest.clone(), name)?, &mut out).map(|(r, _)| r),
            Command::Equivalence => commands::run_equivalence(&require(manifest.clone(), name)?, &mut out),
            Command::Check { pc } => commands::run_check(*pc, &mut out),
            Command::Fit { curve, pc } => {
                let (points, source, manifest_pc) = match (curve, &manifest) {
                    (Some(path), m) => {
                        let (points, hash) = commands::read_curve(path)?;
                        let pc = m.as_ref().map(|m| m.p_c()).transpose()?;
                        (points, hash, pc)
                    }
                    (None, Some(m)) => {
                        let (mut report, points) = commands::run_qc_scan(m, &mut out)?;
                        if !report.passed() {
                            report.failures.insert(0, "scan failed; fit not attempted".into());
                            return Ok(report);
                        }
                        (points, m.hash(), Some(m.p_c()?))
                    }
                    (None, None) => return Err(CliError::Usage("`fit` needs --curve or --manifest".into())),
                };
                let p_c = pc
                    .or(manifest_pc)
                    .ok_or_else(|| CliError::Usage("`fit --curve` needs --pc or a manifest".into()))?;
                commands::write_fit(&points, p_c, &source, &mut out).map(|(r, _)| r)
            }
        }
    })?;
    let workers = pool.current_num_threads();
    out.timing(name, start.elapsed().as_secs_f64(), workers)?;
    Ok((report, out))
}
