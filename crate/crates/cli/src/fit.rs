//! `gen`, `fit` and `bench`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use gmm_ddpm::baselines::{em_fit, gradient_em_fit, power_iteration_fit, EmConfig};
use gmm_ddpm::dataset::save_mxs;
use gmm_ddpm::diagnostics::{
    angle_metrics, center_distance, check_contraction, check_contraction_pooled, CheckReport,
};
use gmm_ddpm::linalg::norm;
use gmm_ddpm::optim::{
    gmm_denoiser, high_noise_time, random_pair_init, symmetrize_two_component, two_stage_fit,
    FitReport, GdConfig,
};
use gmm_ddpm::{estimate_center_norm, Matrix, MixtureParams, RngSeed};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    dataset_for, init_seed, stage_seed, Algorithm, AutoF64, BenchCell, ExperimentConfig,
    MixtureSpec, StageSpec,
};

/// Writes `data_s{seed}.mxs` for every seed and `truth.json`.
pub fn run_gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let truth = cfg.mixture.build()?;
    let paths: Vec<_> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<String> {
            let data =
                gmm_ddpm::sample_mixture(&truth, cfg.data.n, crate::config::data_seed(seed))?;
            let name = format!("data_s{seed}.mxs");
            save_mxs(out.join(&name), &data)?;
            Ok(name)
        })
        .collect::<Result<_>>()?;
    write_json(&out.join("truth.json"), &truth)?;
    eprintln!("wrote truth.json and {}", paths.join(", "));
    Ok(())
}

/// Projection radius at `t = 0` from the data: the center-norm estimate,
/// floored at the estimator's own noise scale `(2d/n)^(1/4)`.
pub fn auto_projection_radius(radius_estimate: f64, d: usize, n: usize) -> f64 {
    radius_estimate.max((2.0 * d as f64 / n as f64).powf(0.25))
}

fn stage_config(
    spec: &StageSpec,
    seed: u64,
    index: usize,
    radius_estimate: f64,
    data: &Matrix,
) -> Result<GdConfig> {
    let t = match spec.t {
        AutoF64::Value(t) => t,
        AutoF64::Auto(_) => high_noise_time(radius_estimate),
    };
    let mut cfg = GdConfig::new(
        t,
        spec.eta,
        spec.steps,
        spec.batch_size,
        stage_seed(seed, index),
    )
    .with_context(|| format!("stages[{index}]"))?
    .with_resample(spec.resample);
    match spec.projection_radius {
        Some(AutoF64::Value(r)) => cfg = cfg.with_projection(r),
        Some(AutoF64::Auto(_)) => {
            cfg = cfg.with_projection(auto_projection_radius(
                radius_estimate,
                data.ncols(),
                data.nrows(),
            ))
        }
        None => {}
    }
    Ok(cfg)
}

/// Warm start: each true center moved by `offset` in a random direction.
pub fn warm_init(truth: &MixtureParams, offset: f64, rng: RngSeed) -> Result<MixtureParams> {
    let noise = gmm_ddpm::sample_mixture(
        &MixtureParams::new(Matrix::zeros(1, truth.d()))?,
        truth.stored_centers().nrows(),
        rng,
    )?;
    let mut centers = truth.stored_centers().clone();
    for i in 0..centers.nrows() {
        let dir = noise.row(i);
        let s = offset / norm(dir);
        for (c, v) in centers.row_mut(i).iter_mut().zip(dir) {
            *c += s * v;
        }
    }
    truth.with_stored_centers(centers).map_err(Into::into)
}

pub struct SeedRun {
    pub seed: u64,
    pub report: FitReport,
    pub radius_estimate: f64,
}

/// Runs the configured algorithm on one seed.
pub fn run_seed(cfg: &ExperimentConfig, truth: &MixtureParams, seed: u64) -> Result<SeedRun> {
    let alg = cfg.algorithm;
    if alg.fits_pair() != truth.is_symmetric_pair()
        && !matches!(alg, Algorithm::Em | Algorithm::GradientEm)
    {
        bail!(
            "algorithm {} needs a {} truth",
            alg.name(),
            if alg.fits_pair() {
                "symmetric pair"
            } else {
                "explicit-centers"
            }
        );
    }
    let mut data = dataset_for(cfg, truth, seed)?;
    if cfg.data.symmetrize {
        data = symmetrize_two_component(&data)?.0;
    }
    let radius_estimate = estimate_center_norm(&data)?;
    let stages = cfg
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| stage_config(s, seed, i, radius_estimate, &data))
        .collect::<Result<Vec<_>>>()?;
    let want = |n: usize| -> Result<()> {
        if stages.len() != n {
            bail!(
                "algorithm {} takes {n} stage(s), the config has {}",
                alg.name(),
                stages.len()
            );
        }
        Ok(())
    };
    let truth_ref = Some(truth);
    let report = match alg {
        Algorithm::TwoStage => {
            want(2)?;
            two_stage_fit(&data, &stages[0], &stages[1], init_seed(seed), truth_ref)?
        }
        Algorithm::Projected => {
            want(1)?;
            if stages[0].projection_radius.is_none() {
                bail!("stages[0].projection_radius is required for projected GD");
            }
            let init = random_pair_init(data.ncols(), init_seed(seed))?;
            gmm_denoiser(&data, &init, &stages[0], truth_ref)?
        }
        Algorithm::WarmStartK => {
            want(1)?;
            let init = warm_init(truth, cfg.init.offset, init_seed(seed))?;
            gmm_denoiser(&data, &init, &stages[0], truth_ref)?
        }
        Algorithm::Em | Algorithm::GradientEm => {
            let init = if truth.is_symmetric_pair() {
                random_pair_init(data.ncols(), init_seed(seed))?
            } else {
                warm_init(truth, cfg.init.offset, init_seed(seed))?
            };
            if alg == Algorithm::Em {
                let em = EmConfig {
                    steps: cfg.baseline.steps,
                    mode: cfg.baseline.em_mode,
                    n_mc: cfg.baseline.n_mc,
                    rng: stage_seed(seed, 0),
                };
                em_fit(&data, &init, &em, truth_ref)?
            } else {
                gradient_em_fit(
                    &data,
                    &init,
                    cfg.baseline.eta,
                    cfg.baseline.steps,
                    truth_ref,
                )?
            }
        }
        Algorithm::PowerIter => {
            power_iteration_fit(&data, cfg.baseline.steps, init_seed(seed), truth_ref)?.report
        }
    };
    Ok(SeedRun {
        seed,
        report,
        radius_estimate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_centers: Vec<Vec<f64>>,
    pub final_distance: f64,
    pub relative_distance: Option<f64>,
    pub final_tan: Option<f64>,
    /// Per-run median contraction ratio over steps above the noise floor.
    pub median_contraction: Option<f64>,
    /// Whether every projected iterate lies in its ball (projected stages
    /// only).
    pub inside_ball: Option<bool>,
    pub radius_estimate: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub algorithm: Algorithm,
    pub truth: MixtureParams,
    pub seeds: Vec<SeedSummary>,
    pub success_count: usize,
    pub success_rate: f64,
    pub median_final_distance: f64,
    pub max_final_distance: f64,
    /// Contraction over all seeds against the algorithm's rate (two-stage:
    /// low-noise stage vs 0.97 + 0.02; warm start: 0.75 + 0.1).
    pub contraction: Option<CheckReport>,
    pub all_inside_ball: Option<bool>,
}

/// Rate and slack for the pooled contraction check, and which stage it
/// looks at.
fn contraction_target(alg: Algorithm) -> Option<(usize, f64, f64)> {
    match alg {
        Algorithm::TwoStage => Some((1, 0.97, 0.02)),
        Algorithm::WarmStartK => Some((0, 0.75, 0.1)),
        _ => None,
    }
}

fn inside_ball(report: &FitReport) -> Option<bool> {
    let mut any = false;
    let mut ok = true;
    for (i, meta) in report.stages.iter().enumerate() {
        let Some(r) = meta.projection_radius else {
            continue;
        };
        any = true;
        let bound = r * meta.alpha * (1.0 + 1e-12);
        ok &= report
            .stage_records(i)
            .all(|rec| rec.iterate.rows().all(|c| norm(c) <= bound));
    }
    any.then_some(ok)
}

pub fn summarize(
    cfg: &ExperimentConfig,
    truth: &MixtureParams,
    runs: &[SeedRun],
) -> Result<FitSummary> {
    let success = cfg.success.clone().unwrap_or_default();
    let target = contraction_target(cfg.algorithm);
    let mut seeds = Vec::new();
    let mut stage_trajs = Vec::new();
    for run in runs {
        let est = &run.report.final_estimate;
        let dist = center_distance(est, truth)?;
        let (rel, tan) = match (est.pair_center(), truth.pair_center()) {
            (Some(m), Some(s)) => (Some(dist / norm(s)), Some(angle_metrics(m, s)?.1)),
            _ => (None, None),
        };
        let median = match target {
            Some((stage, rate, slack)) => {
                let recs: Vec<_> = run.report.stage_records(stage).cloned().collect();
                stage_trajs.push(recs.clone());
                if recs.is_empty() {
                    None
                } else {
                    check_contraction(&recs, rate, slack)?.observed
                }
            }
            None => None,
        };
        let ok = success.max_distance.is_none_or(|m| dist <= m)
            && success
                .max_relative_distance
                .is_none_or(|m| rel.is_some_and(|r| r <= m))
            && success.max_tan.is_none_or(|m| tan.is_some_and(|t| t <= m));
        let inside = inside_ball(&run.report);
        seeds.push(SeedSummary {
            seed: run.seed,
            final_centers: est.stored_centers().to_rows(),
            final_distance: dist,
            relative_distance: rel,
            final_tan: tan,
            median_contraction: median,
            inside_ball: inside,
            radius_estimate: run.radius_estimate,
            success: ok && inside.unwrap_or(true),
        });
    }
    let contraction = match target {
        Some((_, rate, slack)) if stage_trajs.iter().all(|t| !t.is_empty()) => {
            let refs: Vec<&[_]> = stage_trajs.iter().map(Vec::as_slice).collect();
            Some(check_contraction_pooled(&refs, rate, slack)?)
        }
        _ => None,
    };
    let mut dists: Vec<f64> = seeds.iter().map(|s| s.final_distance).collect();
    dists.sort_by(f64::total_cmp);
    let count = seeds.iter().filter(|s| s.success).count();
    let balls: Vec<bool> = seeds.iter().filter_map(|s| s.inside_ball).collect();
    Ok(FitSummary {
        algorithm: cfg.algorithm,
        truth: truth.clone(),
        success_count: count,
        success_rate: count as f64 / seeds.len() as f64,
        median_final_distance: median(&dists),
        max_final_distance: *dists.last().unwrap_or(&f64::NAN),
        seeds,
        contraction,
        all_inside_ball: (!balls.is_empty()).then(|| balls.iter().all(|b| *b)),
    })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Runs every seed, writing `trajectory_s{seed}.jsonl` as each finishes,
/// then `summary.json`.
pub fn run_fit(cfg: &ExperimentConfig, out: &Path) -> Result<FitSummary> {
    let truth = cfg.mixture.build()?;
    let runs: Vec<SeedRun> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<SeedRun> {
            let run = run_seed(cfg, &truth, seed).with_context(|| format!("seed {seed}"))?;
            write_trajectory(&out.join(format!("trajectory_s{seed}.jsonl")), &run.report)?;
            Ok(run)
        })
        .collect::<Result<_>>()?;
    let summary = summarize(cfg, &truth, &runs)?;
    write_json(&out.join("summary.json"), &summary)?;
    eprintln!(
        "{}: {}/{} seeds succeeded, median final distance {:.4}",
        cfg.algorithm.name(),
        summary.success_count,
        summary.seeds.len(),
        summary.median_final_distance
    );
    Ok(summary)
}

pub fn write_trajectory(path: &Path, report: &FitReport) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    );
    for rec in &report.trajectory {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub cell: usize,
    pub algorithm: String,
    pub d: usize,
    pub norm: f64,
    pub n: usize,
    pub seed: u64,
    pub final_distance: f64,
    pub final_tan: Option<f64>,
    pub median_contraction: Option<f64>,
    pub success: bool,
}

fn cell_config(cfg: &ExperimentConfig, cell: &BenchCell) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    c.mixture =
        if cfg.algorithm.fits_pair() || matches!(cfg.mixture, MixtureSpec::SymmetricNorm { .. }) {
            MixtureSpec::SymmetricNorm {
                d: cell.d,
                norm: cell.norm,
            }
        } else {
            let k = cfg.mixture.build()?.k();
            MixtureSpec::Separated {
                k,
                d: cell.d,
                separation: cell.norm,
            }
        };
    c.data.n = cell.n;
    c.data.file = None;
    Ok(c)
}

/// Sweeps the bench grid and writes `bench.csv`.
pub fn run_bench(cfg: &ExperimentConfig, stages_given: bool, out: &Path) -> Result<Vec<BenchRow>> {
    let jobs: Vec<(usize, u64)> = (0..cfg.bench.cells.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let cells: Vec<ExperimentConfig> = cfg
        .bench
        .cells
        .iter()
        .map(|cell| {
            let mut c = cell_config(cfg, cell)?;
            // default stages depend on d and n
            if !stages_given {
                let truth = c.mixture.build()?;
                c.stages = crate::config::default_stages(c.algorithm, &truth, c.data.n)?;
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<BenchRow> = jobs
        .par_iter()
        .map(|&(ci, seed)| -> Result<BenchRow> {
            let c = &cells[ci];
            let truth = c.mixture.build()?;
            let run =
                run_seed(c, &truth, seed).with_context(|| format!("cell {ci}, seed {seed}"))?;
            let s = summarize(c, &truth, std::slice::from_ref(&run))?;
            let seed_sum = &s.seeds[0];
            let cell = &cfg.bench.cells[ci];
            Ok(BenchRow {
                cell: ci,
                algorithm: cfg.algorithm.name().to_string(),
                d: cell.d,
                norm: cell.norm,
                n: cell.n,
                seed,
                final_distance: seed_sum.final_distance,
                final_tan: seed_sum.final_tan,
                median_contraction: seed_sum.median_contraction,
                success: seed_sum.success,
            })
        })
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_path(out.join("bench.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    eprintln!(
        "bench: {} runs over {} cells",
        rows.len(),
        cfg.bench.cells.len()
    );
    Ok(rows)
}
