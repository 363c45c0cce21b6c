//! Command-line experiments: dataset generation, fitting, the diagnostics
//! suite, parameter sweeps and reports.
//!
//! Exit codes: 0 on success, 1 when `verify` finds a failed check, 2 on a
//! usage or configuration error (nothing is written in that case) or when a
//! run cannot complete.

pub mod config;
pub mod fit;
pub mod report;
pub mod verify;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{load_config, Algorithm, ExperimentConfig, Mode};

#[derive(Parser, Debug)]
#[command(
    name = "gmm-ddpm",
    version,
    about = "Learn Gaussian mixture centers with the denoising diffusion objective"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Shared {
    /// JSON experiment config (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds, e.g. `0,1,2` or `0..10` (overrides `seeds`).
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads (overrides `threads`).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample datasets and write the truth.
    Gen(Shared),
    /// Fit one algorithm on every seed.
    Fit {
        algorithm: Algorithm,
        #[command(flatten)]
        shared: Shared,
    },
    /// Run the diagnostics suite.
    Verify {
        #[command(flatten)]
        shared: Shared,
        /// Run only this check (repeatable).
        #[arg(long)]
        check: Vec<String>,
    },
    /// Sweep the bench grid.
    Bench(Shared),
    /// Summarize earlier outputs as Markdown.
    Report(Shared),
}

/// Parses `a,b,c` and `a..b` (half-open) lists.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.parse()?, b.parse()?);
            if b <= a {
                bail!("empty seed range {part}");
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().with_context(|| format!("bad seed `{part}`"))?);
        }
    }
    if out.is_empty() {
        bail!("no seeds given");
    }
    Ok(out)
}

/// Everything a subcommand needs, validated before any file is written.
struct Prepared {
    cfg: ExperimentConfig,
    stages_given: bool,
    out: PathBuf,
}

fn prepare(shared: &Shared, mode: Mode, algorithm: Option<Algorithm>) -> Result<Prepared> {
    let mut cfg = match &shared.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(a) = algorithm {
        cfg.algorithm = a;
    }
    if let Some(s) = &shared.seeds {
        cfg.seeds = parse_seeds(s).context("--seeds")?;
    }
    if let Some(t) = shared.threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        cfg.threads = t;
    }
    if let Some(o) = &shared.out {
        cfg.output_dir = o.clone();
    }
    let stages_given = !cfg.stages.is_empty();
    let cfg = cfg.resolve(mode)?;
    let out = cfg.output_dir.clone();
    Ok(Prepared {
        cfg,
        stages_given,
        out,
    })
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    let (shared, mode, alg, checks) = match &cmd {
        Command::Gen(s) => (s, Mode::Gen, None, Vec::new()),
        Command::Fit { algorithm, shared } => (shared, Mode::Fit, Some(*algorithm), Vec::new()),
        Command::Verify { shared, check } => (shared, Mode::Verify, None, check.clone()),
        Command::Bench(s) => (s, Mode::Bench, None, Vec::new()),
        Command::Report(s) => (s, Mode::Report, None, Vec::new()),
    };
    let p = prepare(shared, mode, alg)?;
    let checks = if checks.is_empty() {
        p.cfg.verify.checks.clone()
    } else {
        checks
    };
    for name in &checks {
        if !verify::CHECKS.contains(&name.as_str()) {
            bail!(
                "unknown check `{name}` (known: {})",
                verify::CHECKS.join(", ")
            );
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(p.cfg.threads)
        .build()?;
    pool.install(|| execute(&p, mode, &checks))
}

fn execute(p: &Prepared, mode: Mode, checks: &[String]) -> Result<i32> {
    let out = &p.out;
    if mode == Mode::Report {
        report::run_report(out)?;
        eprintln!("wrote {}", out.join("report.md").display());
        return Ok(0);
    }
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    std::fs::write(out.join("config.resolved.json"), p.cfg.to_json())?;
    match mode {
        Mode::Gen => fit::run_gen(&p.cfg, out)?,
        Mode::Fit => {
            fit::run_fit(&p.cfg, out)?;
        }
        Mode::Verify => {
            let seed = p.cfg.seeds[0];
            let lines = verify::run_verify(checks, p.cfg.verify.n_mc, seed, out)?;
            if lines.iter().any(|l| !l.ok) {
                return Ok(1);
            }
        }
        Mode::Bench => {
            fit::run_bench(&p.cfg, p.stages_given, out)?;
        }
        Mode::Report => unreachable!("handled above"),
    }
    Ok(0)
}
