//! Reference algorithms: EM and gradient EM for equal-weight mixtures, and
//! power iteration on the empirical second moment.
//!
//! All of them emit [`FitReport`]s with the same trajectory rows as the
//! gradient descent drivers so results can be tabulated side by side.
//! Baselines operate directly at `t = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::mixture::{fill_normal, sample_into, softmax_weights, MixtureParams};
use crate::objective::TanhDerivatives;
use crate::optim::{truth_metrics, FitReport, Resample, RunRecord, StageMetadata};
use crate::quadrature::{gaussian_expectation, Tolerance};
use crate::rng::RngSeed;
use crate::stats::{chunked_mean, chunked_sum, MeanEstimate};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmMode {
    /// Expectations are averages over the dataset.
    #[default]
    FiniteSample,
    /// Expectations are Monte Carlo averages over fresh draws from the truth.
    PopulationMc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub steps: usize,
    pub mode: EmMode,
    pub n_mc: usize,
    pub rng: RngSeed,
}

/// Where the symmetric-pair EM expectation comes from.
#[derive(Clone, Copy, Debug)]
pub enum EmSource<'a> {
    Data(&'a Matrix),
    Population {
        mu_star: &'a [f64],
        n_mc: usize,
        rng: RngSeed,
    },
}

/// Symmetric-pair EM update `μ' = E[tanh(μᵀX)X]`, with standard errors.
pub fn em_step_two(mu: &[f64], source: EmSource<'_>) -> Result<MeanEstimate> {
    let d = mu.len();
    match source {
        EmSource::Data(data) => {
            if data.ncols() != d || data.nrows() == 0 {
                return invalid("data must be nonempty with the same dimension as mu");
            }
            Ok(chunked_mean(
                d,
                data.nrows(),
                RngSeed::new(0, 0),
                || (),
                |_, _, i, out| {
                    let x = data.row(i);
                    let th = dot(mu, x).tanh();
                    for (o, xi) in out.iter_mut().zip(x) {
                        *o = th * xi;
                    }
                },
            ))
        }
        EmSource::Population { mu_star, n_mc, rng } => {
            if mu_star.len() != d || n_mc == 0 {
                return invalid("mu_star must match mu and n_mc must be positive");
            }
            Ok(chunked_mean(
                d,
                n_mc,
                rng,
                || vec![0.0; d],
                |x, rng, _, out| {
                    fill_normal(rng, x);
                    for (xi, m) in x.iter_mut().zip(mu_star) {
                        *xi += m;
                    }
                    let th = TanhDerivatives::at(dot(mu, x)).value;
                    for (o, xi) in out.iter_mut().zip(x.iter()) {
                        *o = th * xi;
                    }
                },
            ))
        }
    }
}

/// Exact population EM update for a symmetric pair. Stein's lemma gives
/// `E[tanh(μᵀX)X] = μ*·E[tanh(u)] + μ·E[tanh'(u)]` with
/// `u ~ N(μᵀμ*, ‖μ‖²)`, two one-dimensional integrals.
pub fn em_step_two_exact(mu: &[f64], mu_star: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != mu_star.len() || mu.is_empty() {
        return invalid("mu and mu_star must be nonempty and equally long");
    }
    let (mean, sd) = (dot(mu, mu_star), norm(mu));
    let tol = Tolerance {
        abs: 1e-300,
        rel: 1e-13,
        max_segments: 3000,
    };
    let e_tanh = gaussian_expectation(|u| u.tanh(), mean, sd, &[0.0], tol).value;
    let e_first =
        gaussian_expectation(|u| TanhDerivatives::at(u).first, mean, sd, &[0.0], tol).value;
    Ok(mu_star
        .iter()
        .zip(mu)
        .map(|(s, m)| e_tanh * s + e_first * m)
        .collect())
}

/// Per-component posterior mass `Σ_x w_i(x)` and weighted sums `Σ_x w_i(x)x`
/// over the expanded centers, flattened as `[mass (k), sums (k·d)]`.
fn posterior_sums(centers: &Matrix, data: &Matrix) -> Vec<f64> {
    let (k, d) = (centers.nrows(), centers.ncols());
    chunked_sum(
        k + k * d,
        data.nrows(),
        RngSeed::new(0, 0),
        || vec![0.0; k],
        |w, _, i, out| {
            let x = data.row(i);
            softmax_weights(centers, x, w);
            out[..k].copy_from_slice(w);
            for c in 0..k {
                for j in 0..d {
                    out[k + c * d + j] = w[c] * x[j];
                }
            }
        },
    )
}

fn check_data(theta: &MixtureParams, data: &Matrix) -> Result<()> {
    if data.nrows() == 0 || data.ncols() != theta.d() {
        return invalid(format!(
            "data must be nonempty with dimension {} (got {}x{})",
            theta.d(),
            data.nrows(),
            data.ncols()
        ));
    }
    Ok(())
}

/// Mean posterior weight of every expanded component over the data.
pub fn posterior_masses(theta: &MixtureParams, data: &Matrix) -> Result<Vec<f64>> {
    check_data(theta, data)?;
    let sums = posterior_sums(&theta.expanded(), data);
    Ok(sums[..theta.k()]
        .iter()
        .map(|m| m / data.nrows() as f64)
        .collect())
}

/// EM update `μ_i' = Σ w_i(x)x / Σ w_i(x)`. A symmetric pair uses the
/// tanh form of the same update.
pub fn em_step_k(theta: &MixtureParams, data: &Matrix) -> Result<MixtureParams> {
    check_data(theta, data)?;
    if let Some(mu) = theta.pair_center() {
        let next = em_step_two(mu, EmSource::Data(data))?;
        return MixtureParams::symmetric(next.mean);
    }
    let (k, d) = (theta.k(), theta.d());
    let sums = posterior_sums(theta.stored_centers(), data);
    let mut out = Matrix::zeros(k, d);
    for i in 0..k {
        let mass = sums[i];
        if !(mass > 0.0) {
            return Err(Error::DegenerateComponent { component: i });
        }
        for (o, s) in out
            .row_mut(i)
            .iter_mut()
            .zip(&sums[k + i * d..k + (i + 1) * d])
        {
            *o = s / mass;
        }
    }
    theta.with_stored_centers(out)
}

/// Gradient-EM update `μ_i' = μ_i + η_i·mean[w_i(x)(x − μ_i)]` with one
/// step size per stored center.
pub fn gradient_em_step_k_with(
    theta: &MixtureParams,
    data: &Matrix,
    etas: &[f64],
) -> Result<MixtureParams> {
    check_data(theta, data)?;
    let rows = theta.stored_centers().nrows();
    if etas.len() != rows {
        return invalid(format!("need {rows} step sizes, got {}", etas.len()));
    }
    if etas.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return invalid("step sizes must be positive and finite");
    }
    let n = data.nrows() as f64;
    let d = theta.d();
    let mut out = theta.stored_centers().clone();
    if let Some(mu) = theta.pair_center() {
        // the pair's direction is mean[tanh(μᵀx)x] − μ
        let m = em_step_two(mu, EmSource::Data(data))?;
        for (j, o) in out.row_mut(0).iter_mut().enumerate() {
            *o += etas[0] * (m.mean[j] - mu[j]);
        }
        return theta.with_stored_centers(out);
    }
    let k = theta.k();
    let sums = posterior_sums(theta.stored_centers(), data);
    for i in 0..k {
        let mass = sums[i];
        let row = out.row_mut(i);
        for j in 0..d {
            let dir = (sums[k + i * d + j] - mass * row[j]) / n;
            row[j] += etas[i] * dir;
        }
    }
    theta.with_stored_centers(out)
}

pub fn gradient_em_step_k(theta: &MixtureParams, data: &Matrix, eta: f64) -> Result<MixtureParams> {
    let rows = theta.stored_centers().nrows();
    gradient_em_step_k_with(theta, data, &vec![eta; rows])
}

/// Mean negative log-likelihood of the data under `theta`.
pub fn mean_nll(theta: &MixtureParams, data: &Matrix) -> Result<f64> {
    check_data(theta, data)?;
    let centers = theta.expanded();
    let k = centers.nrows();
    let d = theta.d() as f64;
    let total = chunked_sum(
        1,
        data.nrows(),
        RngSeed::new(0, 0),
        || (),
        |_, _, i, out| {
            let x = data.row(i);
            let mut max = f64::NEG_INFINITY;
            let logits: Vec<f64> = centers
                .rows()
                .map(|c| -0.5 * c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .inspect(|l| max = max.max(*l))
                .collect();
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            out[0] = -(lse - (k as f64).ln() - 0.5 * d * (2.0 * std::f64::consts::PI).ln());
        },
    );
    Ok(total[0] / data.nrows() as f64)
}

fn baseline_meta(eta: Option<f64>, steps: usize, n: usize) -> StageMetadata {
    StageMetadata {
        t: 0.0,
        alpha: 1.0,
        eta,
        steps,
        batch_size: n,
        n_data: n,
        resample: Resample::FullBatch,
        projection_radius: None,
    }
}

fn iterate_baseline<F>(
    data: &Matrix,
    init: &MixtureParams,
    steps: usize,
    truth: Option<&MixtureParams>,
    mut step: F,
) -> Result<(MixtureParams, Vec<RunRecord>)>
where
    F: FnMut(usize, &MixtureParams) -> Result<MixtureParams>,
{
    let (_, mut prev) = truth_metrics(init, truth);
    let mut theta = init.clone();
    let mut records = Vec::with_capacity(steps);
    for h in 1..=steps {
        let loss = mean_nll(&theta, data)?;
        theta = step(h, &theta)?;
        let (tan_angle, dist) = truth_metrics(&theta, truth);
        let contraction_ratio = match (dist, prev) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        };
        prev = dist;
        records.push(RunRecord {
            stage: 0,
            step: h,
            iterate: theta.stored_centers().clone(),
            loss,
            tan_angle,
            dist,
            contraction_ratio,
            elapsed_ns: None,
        });
    }
    Ok((theta, records))
}

/// Runs EM for `cfg.steps` iterations. Population mode draws `cfg.n_mc`
/// fresh samples from `truth` every step (so `truth` is required); the
/// reported loss is always the data negative log-likelihood.
pub fn em_fit(
    data: &Matrix,
    init: &MixtureParams,
    cfg: &EmConfig,
    truth: Option<&MixtureParams>,
) -> Result<FitReport> {
    check_data(init, data)?;
    if cfg.mode == EmMode::PopulationMc && (truth.is_none() || cfg.n_mc == 0) {
        return invalid("population EM needs a truth mixture and n_mc > 0");
    }
    let (theta, trajectory) =
        iterate_baseline(data, init, cfg.steps, truth, |h, theta| match cfg.mode {
            EmMode::FiniteSample => em_step_k(theta, data),
            EmMode::PopulationMc => {
                let truth = truth.expect("checked above");
                let mut rng = cfg.rng.substream(h as u64).rng();
                let mut fresh = Matrix::zeros(cfg.n_mc, truth.d());
                for i in 0..cfg.n_mc {
                    sample_into(truth, &mut rng, fresh.row_mut(i));
                }
                em_step_k(theta, &fresh)
            }
        })?;
    Ok(FitReport {
        final_estimate: theta,
        initial_estimate: init.clone(),
        trajectory,
        stages: vec![baseline_meta(None, cfg.steps, data.nrows())],
    })
}

/// Runs gradient EM with a common step size on the data.
pub fn gradient_em_fit(
    data: &Matrix,
    init: &MixtureParams,
    eta: f64,
    steps: usize,
    truth: Option<&MixtureParams>,
) -> Result<FitReport> {
    let (theta, trajectory) = iterate_baseline(data, init, steps, truth, |_, theta| {
        gradient_em_step_k(theta, data, eta)
    })?;
    Ok(FitReport {
        final_estimate: theta,
        initial_estimate: init.clone(),
        trajectory,
        stages: vec![baseline_meta(Some(eta), steps, data.nrows())],
    })
}

/// `M̂ = (1/n) Σ x xᵀ − I`.
pub fn second_moment_matrix(data: &Matrix) -> Result<Matrix> {
    let (n, d) = (data.nrows(), data.ncols());
    if n == 0 || d == 0 {
        return invalid("data must be nonempty");
    }
    let sums = chunked_sum(
        d * d,
        n,
        RngSeed::new(0, 0),
        || (),
        |_, _, i, out| {
            let x = data.row(i);
            for a in 0..d {
                for b in 0..d {
                    out[a * d + b] = x[a] * x[b];
                }
            }
        },
    );
    let mut m = Matrix::from_vec(d, d, sums.into_iter().map(|v| v / n as f64).collect())?;
    for a in 0..d {
        m.row_mut(a)[a] -= 1.0;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIterationResult {
    /// Unit top-eigenvector estimate.
    pub direction: Vec<f64>,
    /// Rayleigh quotient of `direction`.
    pub eigenvalue: f64,
    /// Trajectory rows. The iterate is `sqrt(max(λ, 0))·v`, the center
    /// estimate implied by `M̂ ≈ μμᵀ`; the loss is `−λ`.
    pub report: FitReport,
}

impl PowerIterationResult {
    pub fn tan_trajectory(&self) -> Vec<f64> {
        self.report
            .trajectory
            .iter()
            .filter_map(|r| r.tan_angle)
            .collect()
    }
}

fn mat_vec(m: &Matrix, v: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m.rows()) {
        *o = dot(row, v);
    }
}

/// Normalized power iteration on a symmetric matrix from a random start.
pub fn power_iteration(
    matrix: &Matrix,
    steps: usize,
    rng: RngSeed,
    truth: Option<&MixtureParams>,
) -> Result<PowerIterationResult> {
    let d = matrix.nrows();
    if d == 0 || matrix.ncols() != d {
        return invalid("power iteration needs a nonempty square matrix");
    }
    if steps == 0 {
        return invalid("step count must be positive");
    }
    if let Some(t) = truth {
        if !t.is_symmetric_pair() || t.d() != d {
            return invalid("power iteration truth must be a symmetric pair of matching dimension");
        }
    }
    let mut v = vec![0.0; d];
    fill_normal(&mut rng.rng(), &mut v);
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let estimate = |v: &[f64], lambda: f64| {
        let s = lambda.max(0.0).sqrt();
        MixtureParams::symmetric(v.iter().map(|x| x * s).collect())
    };
    let mut mv = vec![0.0; d];
    mat_vec(matrix, &v, &mut mv);
    let init = estimate(&v, dot(&v, &mv))?;
    let (_, mut prev) = truth_metrics(&init, truth);
    let mut records = Vec::with_capacity(steps);
    let mut lambda = 0.0;
    let mut current = init.clone();
    for h in 1..=steps {
        mat_vec(matrix, &v, &mut mv);
        let nm = norm(&mv);
        if nm == 0.0 {
            return invalid("power iteration hit the null space of the matrix");
        }
        v.iter_mut().zip(&mv).for_each(|(x, m)| *x = m / nm);
        mat_vec(matrix, &v, &mut mv);
        lambda = dot(&v, &mv);
        current = estimate(&v, lambda)?;
        let (_, dist) = truth_metrics(&current, truth);
        // the direction is defined even when the implied norm is zero
        let tan_angle = truth
            .and_then(|t| t.pair_center())
            .and_then(|s| crate::diagnostics::angle_metrics(&v, s).ok())
            .map(|(_, tan)| tan);
        let contraction_ratio = match (dist, prev) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        };
        prev = dist;
        records.push(RunRecord {
            stage: 0,
            step: h,
            iterate: current.stored_centers().clone(),
            loss: -lambda,
            tan_angle,
            dist,
            contraction_ratio,
            elapsed_ns: None,
        });
    }
    Ok(PowerIterationResult {
        direction: v,
        eigenvalue: lambda,
        report: FitReport {
            final_estimate: current,
            initial_estimate: init,
            trajectory: records,
            stages: vec![baseline_meta(None, steps, d)],
        },
    })
}

/// Power iteration on `M̂` built from the data.
pub fn power_iteration_fit(
    data: &Matrix,
    steps: usize,
    rng: RngSeed,
    truth: Option<&MixtureParams>,
) -> Result<PowerIterationResult> {
    if data.nrows() < data.ncols() {
        return invalid("power iteration needs at least d samples");
    }
    let m = second_moment_matrix(data)?;
    let mut out = power_iteration(&m, steps, rng, truth)?;
    for s in &mut out.report.stages {
        s.batch_size = data.nrows();
        s.n_data = data.nrows();
    }
    Ok(out)
}
