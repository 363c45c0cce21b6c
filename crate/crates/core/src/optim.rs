//! Gradient descent on the denoising objective at a fixed noise scale, and
//! the three drivers built from it: two-stage (high then low noise),
//! projected GD for small separation, and warm-started K-component GD.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{angle_metrics, center_distance};
use crate::error::{invalid, Result};
use crate::linalg::{norm, Matrix};
use crate::mixture::{fill_normal, MixtureParams, NoiseScale, SampleBatch};
use crate::objective::{grad_k_kernel, grad_two_kernel, KScratch};
use crate::rng::RngSeed;
use crate::stats::chunked_sum;

/// Whether each step sees new samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    /// Fresh noise every step; data rows are taken cyclically.
    #[default]
    FreshMinibatch,
    /// One batch (rows and noise) drawn up front and reused every step.
    FullBatch,
}

/// One gradient descent stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    pub scale: NoiseScale,
    pub eta: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Radius `R` at `t = 0`; iterates are clipped to `R·exp(−t)`.
    pub projection_radius: Option<f64>,
    pub resample: Resample,
    pub rng: RngSeed,
    /// Record wall-clock time per step. Off by default so that reports are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_timing: bool,
}

impl GdConfig {
    pub fn new(t: f64, eta: f64, steps: usize, batch_size: usize, rng: RngSeed) -> Result<Self> {
        let cfg = Self {
            scale: NoiseScale::new(t)?,
            eta,
            steps,
            batch_size,
            projection_radius: None,
            resample: Resample::default(),
            rng,
            record_timing: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_projection(mut self, radius: f64) -> Self {
        self.projection_radius = Some(radius);
        self
    }

    pub fn with_resample(mut self, resample: Resample) -> Self {
        self.resample = resample;
        self
    }

    /// Checks the invariants. A zero step size and a zero step count are
    /// accepted so that degenerate runs can be used as sanity checks.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return invalid(format!(
                "step size must be finite and >= 0, got {}",
                self.eta
            ));
        }
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(self.scale.t > 0.0) {
            return invalid("gradient descent needs a noise time t > 0");
        }
        if let Some(r) = self.projection_radius {
            if !(r > 0.0 && r.is_finite()) {
                return invalid(format!("projection radius must be positive, got {r}"));
            }
        }
        Ok(())
    }
}

/// One row of a trajectory.
///
/// `iterate` holds the stored centers after the step at the working scale
/// `t`. `loss` is the batch loss of the iterate the step started from.
/// Distances are measured at `t = 0`; `contraction_ratio` divides by the
/// previous step's distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: usize,
    pub step: usize,
    pub iterate: Matrix,
    pub loss: f64,
    pub tan_angle: Option<f64>,
    pub dist: Option<f64>,
    pub contraction_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ns: Option<u64>,
}

/// What one stage ran with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetadata {
    pub t: f64,
    pub alpha: f64,
    /// Step size; absent for closed-form updates such as EM.
    pub eta: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub n_data: usize,
    pub resample: Resample,
    pub projection_radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Estimate at `t = 0` (the last iterate times `exp(+t)`).
    pub final_estimate: MixtureParams,
    pub initial_estimate: MixtureParams,
    pub trajectory: Vec<RunRecord>,
    pub stages: Vec<StageMetadata>,
}

impl FitReport {
    pub fn stage_records(&self, stage: usize) -> impl Iterator<Item = &RunRecord> {
        self.trajectory.iter().filter(move |r| r.stage == stage)
    }
}

/// Truth-relative tan-angle and distance of stored centers at `t = 0`.
pub(crate) fn truth_metrics(
    estimate: &MixtureParams,
    truth: Option<&MixtureParams>,
) -> (Option<f64>, Option<f64>) {
    let Some(truth) = truth else {
        return (None, None);
    };
    let dist = center_distance(estimate, truth).ok();
    let tan = match (estimate.pair_center(), truth.pair_center()) {
        (Some(m), Some(s)) => angle_metrics(m, s).ok().map(|(_, tan)| tan),
        _ => None,
    };
    (tan, dist)
}

fn check_truth(init: &MixtureParams, truth: Option<&MixtureParams>) -> Result<()> {
    if let Some(truth) = truth {
        if truth.d() != init.d()
            || truth.k() != init.k()
            || truth.is_symmetric_pair() != init.is_symmetric_pair()
        {
            return invalid(format!(
                "truth (k={}, d={}) does not match the initialization (k={}, d={})",
                truth.k(),
                truth.d(),
                init.k(),
                init.d()
            ));
        }
    }
    Ok(())
}

/// Clips every center to the ball; reports whether anything moved.
fn project(theta: &mut Matrix, radius: f64) -> bool {
    let mut clipped = false;
    for i in 0..theta.nrows() {
        let row = theta.row_mut(i);
        let n = norm(row);
        if n > radius {
            let s = radius / n;
            row.iter_mut().for_each(|v| *v *= s);
            clipped = true;
        }
    }
    clipped
}

/// Mean gradient (flattened) and mean loss over one batch.
fn step_gradient(
    theta: &Matrix,
    symmetric: bool,
    data: &Matrix,
    cfg: &GdConfig,
    step_seed: RngSeed,
    start: usize,
    fixed: Option<&SampleBatch>,
) -> (Vec<f64>, f64) {
    let d = data.ncols();
    let dim = theta.nrows() * d;
    let (alpha, beta) = (cfg.scale.alpha, cfg.scale.beta);
    let ib = 1.0 / beta;
    let centers = if symmetric {
        let mu = theta.row(0);
        let mut c = mu.to_vec();
        c.extend(mu.iter().map(|v| -v));
        Matrix::from_vec(2, d, c).expect("shape")
    } else {
        theta.clone()
    };
    let n = data.nrows();
    let bs = cfg.batch_size;
    let sums = chunked_sum(
        dim + 1,
        bs,
        step_seed,
        || {
            (
                KScratch::new(centers.nrows(), d),
                vec![0.0; d],
                vec![0.0; d],
            )
        },
        |(s, z, xt), rng, i, out| {
            let (grad, loss) = out.split_at_mut(dim);
            let (z, xt): (&[f64], &[f64]) = match fixed {
                Some(b) => (b.z().row(i), b.xt().row(i)),
                None => {
                    let x0 = data.row((start + i) % n);
                    fill_normal(rng, z);
                    for j in 0..d {
                        xt[j] = alpha * x0[j] + beta * z[j];
                    }
                    (z, xt)
                }
            };
            loss[0] = if symmetric {
                grad_two_kernel(theta.row(0), z, xt, ib, grad)
            } else {
                grad_k_kernel(&centers, z, xt, ib, s, grad)
            };
        },
    );
    let inv = 1.0 / bs as f64;
    let loss = sums[dim] * inv;
    let grad = sums[..dim].iter().map(|v| v * inv).collect();
    (grad, loss)
}

struct StageOutcome {
    estimate: MixtureParams,
    records: Vec<RunRecord>,
    meta: StageMetadata,
}

fn run_stage(
    data: &Matrix,
    init: &MixtureParams,
    cfg: &GdConfig,
    truth: Option<&MixtureParams>,
    stage: usize,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let n = data.nrows();
    if n == 0 {
        return invalid("dataset is empty");
    }
    if data.ncols() != init.d() {
        return invalid(format!(
            "data has dimension {}, initialization has {}",
            data.ncols(),
            init.d()
        ));
    }
    check_truth(init, truth)?;
    let fixed = match cfg.resample {
        Resample::FullBatch if cfg.batch_size > n => {
            return invalid(format!(
                "full_batch needs batch_size <= n ({} > {n})",
                cfg.batch_size
            ));
        }
        Resample::FullBatch => {
            let rows: Vec<f64> = (0..cfg.batch_size)
                .flat_map(|i| data.row(i).to_vec())
                .collect();
            let x0 = Matrix::from_vec(cfg.batch_size, data.ncols(), rows)?;
            let mut r = cfg.rng.substream(u64::MAX).rng();
            let mut z = Matrix::zeros(cfg.batch_size, data.ncols());
            z.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = r.sample(StandardNormal));
            Some(SampleBatch::from_parts(x0, z, cfg.scale)?)
        }
        Resample::FreshMinibatch => None,
    };

    let (alpha, back) = (cfg.scale.alpha, cfg.scale.t.exp());
    let radius_t = cfg.projection_radius.map(|r| r * alpha);
    let symmetric = init.is_symmetric_pair();
    let mut theta = init.stored_centers().scaled(alpha);
    // exp(-t)·exp(t) need not round to 1, so an untouched iterate hands back
    // the initialization itself
    let mut moved = false;
    if let Some(r) = radius_t {
        moved |= project(&mut theta, r);
    }
    let (_, mut prev_dist) = truth_metrics(&init.with_stored_centers(theta.scaled(back))?, truth);
    let mut records = Vec::with_capacity(cfg.steps);
    let mut start = 0;
    for h in 1..=cfg.steps {
        let clock = cfg.record_timing.then(Instant::now);
        let (grad, loss) = step_gradient(
            &theta,
            symmetric,
            data,
            cfg,
            cfg.rng.substream(h as u64),
            start,
            fixed.as_ref(),
        );
        start = (start + cfg.batch_size) % n;
        for (v, g) in theta.as_mut_slice().iter_mut().zip(&grad) {
            let step = cfg.eta * g;
            moved |= step != 0.0;
            *v -= step;
        }
        if let Some(r) = radius_t {
            moved |= project(&mut theta, r);
        }
        let current = init.with_stored_centers(theta.scaled(back))?;
        let (tan_angle, dist) = truth_metrics(&current, truth);
        let contraction_ratio = match (dist, prev_dist) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        };
        prev_dist = dist;
        records.push(RunRecord {
            stage,
            step: h,
            iterate: theta.clone(),
            loss,
            tan_angle,
            dist,
            contraction_ratio,
            elapsed_ns: clock.map(|c| c.elapsed().as_nanos() as u64),
        });
    }
    let estimate = if moved {
        init.with_stored_centers(theta.scaled(back))?
    } else {
        init.clone()
    };
    Ok(StageOutcome {
        estimate,
        records,
        meta: StageMetadata {
            t: cfg.scale.t,
            alpha,
            eta: Some(cfg.eta),
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            n_data: n,
            resample: cfg.resample,
            projection_radius: cfg.projection_radius,
        },
    })
}

/// Gradient descent on the denoising objective at one noise scale.
///
/// `init` is given at `t = 0`; iterates live at scale `t` and the final
/// estimate is rescaled back by `exp(+t)`.
pub fn gmm_denoiser(
    data: &Matrix,
    init: &MixtureParams,
    cfg: &GdConfig,
    truth: Option<&MixtureParams>,
) -> Result<FitReport> {
    let out = run_stage(data, init, cfg, truth, 0)?;
    Ok(FitReport {
        final_estimate: out.estimate,
        initial_estimate: init.clone(),
        trajectory: out.records,
        stages: vec![out.meta],
    })
}

/// A symmetric-pair initialization `μ⁰ ~ N(0, I_d)`.
pub fn random_pair_init(d: usize, rng: RngSeed) -> Result<MixtureParams> {
    let mut mu = vec![0.0; d];
    fill_normal(&mut rng.rng(), &mut mu);
    MixtureParams::symmetric(mu)
}

/// Stage-one noise time from an estimate `R` of the center norm:
/// `t₁ = ln(R·B^2.5)` with `B = max(2, 1.1R)`, which puts `‖μ*_{t₁}‖` near
/// the middle of the window `[B⁻³, B⁻²]` on a log scale. Falls back to
/// [`MIN_HIGH_NOISE_TIME`] when the formula gives less.
pub fn high_noise_time(radius: f64) -> f64 {
    let b = (1.1 * radius).max(2.0);
    let t = (radius * b.powf(2.5)).ln();
    if t.is_finite() {
        t.max(MIN_HIGH_NOISE_TIME)
    } else {
        MIN_HIGH_NOISE_TIME
    }
}

pub const MIN_HIGH_NOISE_TIME: f64 = 0.1;

/// Default stage-two noise time.
pub const LOW_NOISE_TIME: f64 = 0.1;
/// Default stage-one step size.
pub const HIGH_NOISE_ETA: f64 = 1.0 / 20.0;
/// Default stage-two step size.
pub const LOW_NOISE_ETA: f64 = 0.05;

/// Two-stage fit of a symmetric pair: a random `N(0, I)` start refined at
/// high noise (`cfg_high`), then at low noise (`cfg_low`). Trajectory rows
/// carry stage 0 and stage 1 respectively.
pub fn two_stage_fit(
    data: &Matrix,
    cfg_high: &GdConfig,
    cfg_low: &GdConfig,
    rng: RngSeed,
    truth: Option<&MixtureParams>,
) -> Result<FitReport> {
    let init = random_pair_init(data.ncols(), rng)?;
    let high = run_stage(data, &init, cfg_high, truth, 0)?;
    let low = run_stage(data, &high.estimate, cfg_low, truth, 1)?;
    let mut trajectory = high.records;
    trajectory.extend(low.records);
    Ok(FitReport {
        final_estimate: low.estimate,
        initial_estimate: init,
        trajectory,
        stages: vec![high.meta, low.meta],
    })
}

/// Noise time `ln(d/ε)` used for the small-separation regime.
pub fn projection_time(d: usize, eps_target: f64) -> Result<f64> {
    let t = (d as f64 / eps_target).ln();
    if !(t > 0.0 && t.is_finite()) {
        return invalid(format!("ln(d/eps) must be positive, got {t}"));
    }
    Ok(t)
}

/// Projected GD for a symmetric pair from a random `N(0, I)` start.
pub fn projected_gd_fit(
    data: &Matrix,
    cfg: &GdConfig,
    rng: RngSeed,
    truth: Option<&MixtureParams>,
) -> Result<FitReport> {
    if cfg.projection_radius.is_none() {
        return invalid("projected GD needs a projection radius");
    }
    let init = random_pair_init(data.ncols(), rng)?;
    gmm_denoiser(data, &init, cfg, truth)
}

/// Default warm-start step size `2K/3`.
pub fn warm_start_eta(k: usize) -> f64 {
    2.0 * k as f64 / 3.0
}

/// GD on all `K` centers at once from a warm start.
pub fn warm_start_k_fit(
    data: &Matrix,
    init: &MixtureParams,
    cfg: &GdConfig,
    truth: Option<&MixtureParams>,
) -> Result<FitReport> {
    if init.is_symmetric_pair() {
        return invalid("warm-start K fitting expects explicit centers, not a symmetric pair");
    }
    gmm_denoiser(data, init, cfg, truth)
}

/// Subtracts the empirical mean from every row, turning data from
/// `½N(m + μ, I) + ½N(m − μ, I)` into symmetric-pair form.
pub fn symmetrize_two_component(data: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let n = data.nrows();
    if n == 0 {
        return invalid("dataset is empty");
    }
    let d = data.ncols();
    let mut mean = vec![0.0; d];
    for row in data.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = data.clone();
    for i in 0..n {
        for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok((out, mean))
}
