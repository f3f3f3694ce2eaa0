//! Command-line surface: argument parsing, dispatch, manifests and exit codes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crossdiff_core::io::write_atomic;
use crossdiff_core::{Error, Result};

use crate::config::{load, LoadedConfig};
use crate::manifest::RunManifest;
use crate::output::Output;
use crate::studies::{self, Report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_ACCEPTANCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "crossdiff", version, about = "Cross-diffusion population experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (defaults to outputs.directory from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Reuse cached sub-run results found in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the model assumptions on a probe grid.
    Validate(RunArgs),
    /// One IBM run at the first K of the ibm section.
    SimulateIbm(RunArgs),
    SolvePde(RunArgs),
    /// Sample forward/inverse flows and Jacobians at the configured probes.
    Flow(RunArgs),
    StudyLargeK(RunArgs),
    StudyDirac(RunArgs),
    StudyFlow(RunArgs),
    StudyUniqueness(RunArgs),
    /// Summarize the manifests found in a directory.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::SimulateIbm(_) => "simulate-ibm",
            Command::SolvePde(_) => "solve-pde",
            Command::Flow(_) => "flow",
            Command::StudyLargeK(_) => "study-large-k",
            Command::StudyDirac(_) => "study-dirac",
            Command::StudyFlow(_) => "study-flow",
            Command::StudyUniqueness(_) => "study-uniqueness",
            Command::Report { .. } => "report",
        }
    }

    fn is_study(&self) -> bool {
        self.name().starts_with("study-")
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: &Command) -> Result<i32> {
    let args = match cmd {
        Command::Report { out } => return report(out),
        Command::Validate(a)
        | Command::SimulateIbm(a)
        | Command::SolvePde(a)
        | Command::Flow(a)
        | Command::StudyLargeK(a)
        | Command::StudyDirac(a)
        | Command::StudyFlow(a)
        | Command::StudyUniqueness(a) => a,
    };
    let cfg = load(&args.config)?;
    let manifest = run_loaded(cmd, &cfg, args)?;
    if cmd.is_study() && !manifest.passed() {
        for (name, ok) in &manifest.acceptance {
            if !ok {
                eprintln!("acceptance check failed: {name}");
            }
        }
        return Ok(EXIT_ACCEPTANCE);
    }
    Ok(EXIT_OK)
}

/// Runs one command against an already loaded config and writes its manifest.
pub fn run_loaded(cmd: &Command, cfg: &LoadedConfig, args: &RunArgs) -> Result<RunManifest> {
    if let Some(n) = args.workers {
        if n == 0 {
            return Err(Error::InvalidParameter("--workers must be positive".into()));
        }
        // a second call in the same process keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = args.seed.unwrap_or_else(|| cfg.seed());
    let root = match &args.out {
        Some(p) => p.clone(),
        None => cfg.base.join(&cfg.config.outputs.directory),
    };
    let out = Output::new(root, args.resume);
    let start = Instant::now();
    let report: Report = match cmd {
        Command::Validate(_) => studies::validate(cfg)?,
        Command::SimulateIbm(_) => studies::simulate_ibm(cfg, &out, seed)?,
        Command::SolvePde(_) => studies::solve_pde(cfg, &out)?,
        Command::Flow(_) => studies::flow_bundle(cfg, &out, seed)?,
        Command::StudyLargeK(_) => studies::study_large_k(cfg, &out, seed)?,
        Command::StudyDirac(_) => studies::study_dirac(cfg, &out, seed)?,
        Command::StudyFlow(_) => studies::study_flow(cfg, &out, seed)?,
        Command::StudyUniqueness(_) => studies::study_uniqueness(cfg, &out)?,
        Command::Report { .. } => unreachable!(),
    };
    let mut manifest = RunManifest::new(cmd.name(), &cfg.raw, seed);
    manifest.summary = report.summary;
    manifest.acceptance = report.acceptance.into_iter().collect();
    manifest.files = out.take_written();
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    let path = out.root().join(RunManifest::file_name(cmd.name()));
    write_atomic(&path, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn report(dir: &Path) -> Result<i32> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".manifest.json"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::InvalidParameter(format!("no manifests in {}", dir.display())));
    }
    for p in entries {
        let m: RunManifest = serde_json::from_slice(&std::fs::read(&p)?)?;
        let status = if m.acceptance.is_empty() {
            "n/a"
        } else if m.passed() {
            "PASS"
        } else {
            "FAIL"
        };
        println!(
            "{:<18} {:<5} seed={} {:.1}s config={} files={}",
            m.command,
            status,
            m.seed,
            m.wall_clock_seconds,
            &m.config_hash[..12],
            m.files.len()
        );
        for (name, ok) in &m.acceptance {
            println!("    {} {}", if *ok { "ok  " } else { "FAIL" }, name);
        }
    }
    Ok(EXIT_OK)
}
