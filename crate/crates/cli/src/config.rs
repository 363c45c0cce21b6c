//! Experiment configuration: a strict JSON schema with documented defaults.
//!
//! Unknown keys are rejected. After loading, every default is filled in and
//! the resolved config is written next to the outputs as
//! `config.resolved.json`, so a run can be repeated from that file alone.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gmm_ddpm::baselines::EmMode;
use gmm_ddpm::dataset::load_dataset;
use gmm_ddpm::diagnostics::separated_centers;
use gmm_ddpm::optim::{
    projection_time, warm_start_eta, Resample, HIGH_NOISE_ETA, LOW_NOISE_ETA, LOW_NOISE_TIME,
};
use gmm_ddpm::{Matrix, MixtureParams, RngSeed};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Gen,
    Fit,
    Verify,
    Bench,
    Report,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    TwoStage,
    Projected,
    WarmStartK,
    Em,
    GradientEm,
    PowerIter,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::TwoStage => "two_stage",
            Self::Projected => "projected",
            Self::WarmStartK => "warm_start_k",
            Self::Em => "em",
            Self::GradientEm => "gradient_em",
            Self::PowerIter => "power_iter",
        }
    }

    /// Whether the algorithm fits a symmetric pair (as opposed to explicit
    /// centers).
    pub fn fits_pair(self) -> bool {
        matches!(self, Self::TwoStage | Self::Projected | Self::PowerIter)
    }
}

/// The literal string `"auto"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoKeyword {
    Auto,
}

/// A number, or `"auto"` for a value chosen from the data at run time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoF64 {
    Value(f64),
    Auto(AutoKeyword),
}

impl fmt::Display for AutoF64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Value(v) => write!(f, "{v}"),
            Self::Auto(_) => f.write_str("auto"),
        }
    }
}

const AUTO: AutoF64 = AutoF64::Auto(AutoKeyword::Auto);

/// Ground-truth mixture, written as `{"<kind>": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MixtureSpec {
    /// `½N(μ, I) + ½N(−μ, I)`.
    Symmetric { mu: Vec<f64> },
    /// Symmetric pair with `μ = norm·e₁`.
    SymmetricNorm { d: usize, norm: f64 },
    /// `k` equal-weight centers with the given pairwise separation.
    Separated { k: usize, d: usize, separation: f64 },
    /// Explicit equal-weight centers.
    Centers { centers: Vec<Vec<f64>> },
    /// A truth file written by `gen` (MixtureParams JSON).
    File { path: PathBuf },
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self::SymmetricNorm { d: 8, norm: 1.5 }
    }
}

impl MixtureSpec {
    pub fn build(&self) -> Result<MixtureParams> {
        Ok(match self {
            Self::Symmetric { mu } => MixtureParams::symmetric(mu.clone())?,
            Self::SymmetricNorm { d, norm } => {
                if *d == 0 {
                    bail!("mixture.d must be at least 1");
                }
                let mut mu = vec![0.0; *d];
                mu[0] = *norm;
                MixtureParams::symmetric(mu)?
            }
            Self::Separated { k, d, separation } => {
                separated_centers(*k, *d, *separation, RngSeed::new(0, 0))?
            }
            Self::Centers { centers } => MixtureParams::from_rows(centers)?,
            Self::File { path } => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read truth file {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("malformed truth file {}", path.display()))?
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Samples per seed when the data is generated.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Dataset to load instead of sampling (`.mxs` or `.csv`). The token
    /// `{seed}` is replaced by the seed.
    #[serde(default)]
    pub file: Option<String>,
    /// Subtract the empirical mean before fitting a pair.
    #[serde(default)]
    pub symmetrize: bool,
}

fn default_n() -> usize {
    50_000
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n: default_n(),
            file: None,
            symmetrize: false,
        }
    }
}

/// One gradient descent stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Noise time; `"auto"` picks the high-noise time from the data radius.
    pub t: AutoF64,
    pub eta: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Ball radius at `t = 0`; `"auto"` uses the data radius estimate.
    #[serde(default)]
    pub projection_radius: Option<AutoF64>,
    #[serde(default)]
    pub resample: Resample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    /// Distance of each warm-start center from its true center.
    #[serde(default = "default_offset")]
    pub offset: f64,
}

fn default_offset() -> f64 {
    0.5
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            offset: default_offset(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    #[serde(default = "default_baseline_steps")]
    pub steps: usize,
    /// Gradient EM step size.
    #[serde(default = "default_baseline_eta")]
    pub eta: f64,
    #[serde(default)]
    pub em_mode: EmMode,
    /// Fresh draws per step in population EM.
    #[serde(default = "default_em_n_mc")]
    pub n_mc: usize,
}

fn default_baseline_steps() -> usize {
    50
}
fn default_baseline_eta() -> f64 {
    1.0
}
fn default_em_n_mc() -> usize {
    100_000
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            steps: default_baseline_steps(),
            eta: default_baseline_eta(),
            em_mode: EmMode::default(),
            n_mc: default_em_n_mc(),
        }
    }
}

/// Per-seed success rule; every bound that is set must hold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessSpec {
    #[serde(default)]
    pub max_distance: Option<f64>,
    /// Bound on `‖μ̃ − μ*‖ / ‖μ*‖` (pairs only).
    #[serde(default)]
    pub max_relative_distance: Option<f64>,
    /// Bound on the final tan-angle (pairs only).
    #[serde(default)]
    pub max_tan: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    /// Checks to run; empty means all.
    #[serde(default)]
    pub checks: Vec<String>,
    /// Monte Carlo draws per estimate.
    #[serde(default = "default_verify_n_mc")]
    pub n_mc: usize,
}

fn default_verify_n_mc() -> usize {
    200_000
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            checks: Vec::new(),
            n_mc: default_verify_n_mc(),
        }
    }
}

/// One bench cell. `norm` is the center norm for pair algorithms and the
/// pairwise separation for the others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCell {
    pub d: usize,
    pub norm: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    #[serde(default = "default_cells")]
    pub cells: Vec<BenchCell>,
}

fn default_cells() -> Vec<BenchCell> {
    let mut cells = Vec::new();
    for n in [10_000, 50_000] {
        for norm in [1.0, 1.5, 2.0] {
            cells.push(BenchCell { d: 8, norm, n });
        }
    }
    cells
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            cells: default_cells(),
        }
    }
}

/// The whole experiment. Every field has a default, so `{}` is a valid
/// config (the two-stage desk run: `d = 8`, `‖μ*‖ = 1.5`, `n = 5·10⁴`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Filled from the subcommand in the resolved config.
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub mixture: MixtureSpec,
    #[serde(default)]
    pub data: DataSpec,
    /// Gradient descent stages; empty selects the algorithm's defaults.
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub baseline: BaselineSpec,
    /// Empty selects the algorithm's default rule.
    #[serde(default)]
    pub success: Option<SuccessSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub bench: BenchSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_threads() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("the empty config is valid")
    }
}

/// A config that failed to parse, with the offending field path and the
/// position in the file.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub field: String,
    pub message: String,
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}: ", self.path, self.line, self.column)?;
        if self.field.is_empty() || self.field == "." {
            write!(f, "{}", self.message)
        } else {
            write!(f, "field `{}`: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

/// Parses a config strictly (unknown keys, type mismatches and syntax
/// errors all fail with a field path and line/column).
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let parsed: Result<ExperimentConfig, _> = serde_path_to_error::deserialize(de);
    let cfg = parsed.map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        ConfigError {
            path: origin.to_string(),
            field,
            message: strip_position(&inner.to_string()),
            line: inner.line(),
            column: inner.column(),
        }
    })?;
    cfg.validate().map_err(|(field, message)| ConfigError {
        path: origin.to_string(),
        field: field.to_string(),
        message,
        line: 0,
        column: 0,
    })?;
    Ok(cfg)
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    Ok(parse_config(&text, &path.display().to_string())?)
}

impl ExperimentConfig {
    fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.seeds.is_empty() {
            return Err(("seeds", "at least one seed is required".into()));
        }
        if self.threads == 0 {
            return Err(("threads", "must be at least 1".into()));
        }
        if self.data.n == 0 && self.data.file.is_none() {
            return Err(("data.n", "must be at least 1".into()));
        }
        if let MixtureSpec::File { path } = &self.mixture {
            if !path.exists() {
                return Err(("mixture.path", format!("{} does not exist", path.display())));
            }
        }
        if let Some(file) = &self.data.file {
            for seed in &self.seeds {
                let p = data_path(file, *seed);
                if !p.exists() {
                    return Err(("data.file", format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Fills every default that does not depend on the data: the mode, the
    /// stage list and the success rule.
    pub fn resolve(mut self, mode: Mode) -> Result<Self> {
        self.mode = Some(mode);
        let truth = self.mixture.build()?;
        if self.stages.is_empty() {
            self.stages = default_stages(self.algorithm, &truth, self.data.n)?;
        }
        if self.success.is_none() {
            self.success = Some(default_success(self.algorithm));
        }
        Ok(self)
    }

    /// Pretty JSON of the config, newline terminated.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Substitutes the seed into a dataset path template.
pub fn data_path(template: &str, seed: u64) -> PathBuf {
    PathBuf::from(template.replace("{seed}", &seed.to_string()))
}

/// Loads the dataset for `seed`, or samples it from the truth.
pub fn dataset_for(cfg: &ExperimentConfig, truth: &MixtureParams, seed: u64) -> Result<Matrix> {
    match &cfg.data.file {
        Some(t) => {
            let p = data_path(t, seed);
            load_dataset(&p).with_context(|| format!("cannot load dataset {}", p.display()))
        }
        None => Ok(gmm_ddpm::sample_mixture(
            truth,
            cfg.data.n,
            data_seed(seed),
        )?),
    }
}

/// Stream layout: data on stream 0, initialization on stream 1, stage `i`
/// on stream `2 + i`.
pub fn data_seed(seed: u64) -> RngSeed {
    RngSeed::new(seed, 0)
}
pub fn init_seed(seed: u64) -> RngSeed {
    RngSeed::new(seed, 1)
}
pub fn stage_seed(seed: u64, stage: usize) -> RngSeed {
    RngSeed::new(seed, 2 + stage as u64)
}

pub fn default_stages(
    algorithm: Algorithm,
    truth: &MixtureParams,
    n: usize,
) -> Result<Vec<StageSpec>> {
    let stage = |t: AutoF64, eta: f64, steps: usize, batch_size: usize| StageSpec {
        t,
        eta,
        steps,
        batch_size,
        projection_radius: None,
        resample: Resample::FreshMinibatch,
    };
    Ok(match algorithm {
        Algorithm::TwoStage => vec![
            stage(AUTO, HIGH_NOISE_ETA, 800, 10_000),
            stage(AutoF64::Value(LOW_NOISE_TIME), LOW_NOISE_ETA, 300, 50_000),
        ],
        Algorithm::Projected => {
            // t = ln(d/ε) with ε = d/2
            let d = truth.d();
            let t = projection_time(d, d as f64 / 2.0)?;
            let mut s = stage(AutoF64::Value(t), 8.0, 250, n);
            s.projection_radius = Some(AUTO);
            vec![s]
        }
        Algorithm::WarmStartK => vec![stage(AutoF64::Value(0.2), warm_start_eta(truth.k()), 30, n)],
        Algorithm::Em | Algorithm::GradientEm | Algorithm::PowerIter => Vec::new(),
    })
}

pub fn default_success(algorithm: Algorithm) -> SuccessSpec {
    match algorithm {
        Algorithm::Projected => SuccessSpec {
            max_distance: None,
            max_relative_distance: Some(0.5),
            max_tan: Some(0.3),
        },
        _ => SuccessSpec {
            max_distance: Some(0.1),
            ..SuccessSpec::default()
        },
    }
}
