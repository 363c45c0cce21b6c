//! The denoising objective `‖s_θ(x_t) + z/β‖²` and its gradients.
//!
//! Gradient convention: every gradient here omits the chain-rule factor 2
//! of `∇‖·‖²`, so it equals half the derivative of the pointwise loss.
//! Step sizes and contraction constants are quoted in this convention.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{dot, norm, norm_sq, Matrix};
use crate::mixture::{
    fill_normal, sample_into, score_into, softmax_weights, BatchRow, MixtureParams, NoiseScale,
    SampleBatch,
};
use crate::quadrature::{gaussian_expectation, Tolerance};
use crate::rng::{Rng, RngSeed};
use crate::stats::{chunked_mean, chunked_sum, MeanEstimate};

/// `tanh` and its first three derivatives at one point, all derived from a
/// single `tanh` evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TanhDerivatives {
    pub value: f64,
    pub first: f64,
    pub second: f64,
    pub third: f64,
}

impl TanhDerivatives {
    pub fn at(u: f64) -> Self {
        let t = u.tanh();
        let t2 = t * t;
        let first = (1.0 - t) * (1.0 + t);
        Self {
            value: t,
            first,
            second: -2.0 * t * first,
            third: -2.0 + 8.0 * t2 - 6.0 * t2 * t2,
        }
    }
}

/// A per-row gradient (one row for a symmetric pair, `k` rows otherwise)
/// and the loss at the same point.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub grad: Matrix,
    pub loss: f64,
}

fn inv_beta(scale: NoiseScale) -> Result<f64> {
    if scale.beta <= 0.0 {
        return invalid("the objective needs t > 0 (beta = 0 at t = 0)");
    }
    Ok(1.0 / scale.beta)
}

fn check_row(d: usize, row: &BatchRow<'_>) -> Result<()> {
    if row.x0.len() != d || row.z.len() != d || row.xt.len() != d {
        return invalid(format!("batch row does not have dimension {d}"));
    }
    Ok(())
}

/// Scratch buffers for the K-component kernels.
pub(crate) struct KScratch {
    pub w: Vec<f64>,
    pub mbar: Vec<f64>,
    pub r: Vec<f64>,
}

impl KScratch {
    pub fn new(k: usize, d: usize) -> Self {
        Self {
            w: vec![0.0; k],
            mbar: vec![0.0; d],
            r: vec![0.0; d],
        }
    }
}

/// Loss at one row given the expanded centers.
pub(crate) fn loss_kernel(
    centers: &Matrix,
    z: &[f64],
    xt: &[f64],
    ib: f64,
    s: &mut KScratch,
) -> f64 {
    score_into(centers, xt, &mut s.w, &mut s.r);
    s.r.iter()
        .zip(z)
        .map(|(si, zi)| (si + zi * ib).powi(2))
        .sum()
}

/// Symmetric-pair gradient at one row, written to `out`; returns the loss.
///
/// With `u = μᵀx_t` and `r = tanh(u)μ − x_t + z/β` the gradient is
/// `tanh(u)·r + tanh'(u)·(μᵀr)·x_t`.
pub(crate) fn grad_two_kernel(mu: &[f64], z: &[f64], xt: &[f64], ib: f64, out: &mut [f64]) -> f64 {
    let td = TanhDerivatives::at(dot(mu, xt));
    let mut mu_r = 0.0;
    let mut loss = 0.0;
    for j in 0..mu.len() {
        let r = td.value * mu[j] - xt[j] + z[j] * ib;
        out[j] = r;
        mu_r += mu[j] * r;
        loss += r * r;
    }
    for j in 0..mu.len() {
        out[j] = td.value * out[j] + td.first * mu_r * xt[j];
    }
    loss
}

/// K-component gradient at one row into `out` (k·d, row-major); returns
/// the loss.
///
/// Row `i` is `J_iᵀ r` with `r = s(x_t) + z/β` and
/// `J_i = w_i·I + w_i(μ_i − m̄)(x_t − μ_i)ᵀ`, `m̄ = Σ_j w_j μ_j`.
pub(crate) fn grad_k_kernel(
    centers: &Matrix,
    z: &[f64],
    xt: &[f64],
    ib: f64,
    s: &mut KScratch,
    out: &mut [f64],
) -> f64 {
    let d = xt.len();
    softmax_weights(centers, xt, &mut s.w);
    s.mbar.iter_mut().for_each(|v| *v = 0.0);
    for (wi, c) in s.w.iter().zip(centers.rows()) {
        for (m, ci) in s.mbar.iter_mut().zip(c) {
            *m += wi * ci;
        }
    }
    let mut loss = 0.0;
    for j in 0..d {
        s.r[j] = s.mbar[j] - xt[j] + z[j] * ib;
        loss += s.r[j] * s.r[j];
    }
    for (i, c) in centers.rows().enumerate() {
        let wi = s.w[i];
        let proj: f64 = (0..d).map(|j| (c[j] - s.mbar[j]) * s.r[j]).sum();
        let o = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            o[j] = wi * (s.r[j] + proj * (xt[j] - c[j]));
        }
    }
    loss
}

/// `‖s_θ(x_t) + z/β‖²` at one batch row.
pub fn pointwise_loss(
    params_t: &MixtureParams,
    row: BatchRow<'_>,
    scale: NoiseScale,
) -> Result<f64> {
    let ib = inv_beta(scale)?;
    check_row(params_t.d(), &row)?;
    let centers = params_t.expanded();
    let mut s = KScratch::new(centers.nrows(), params_t.d());
    Ok(loss_kernel(&centers, row.z, row.xt, ib, &mut s))
}

/// Mean pointwise loss over a batch, summed in fixed chunk order.
pub fn batch_loss(params_t: &MixtureParams, batch: &SampleBatch) -> Result<f64> {
    let ib = inv_beta(batch.scale())?;
    if batch.is_empty() {
        return invalid("batch is empty");
    }
    if batch.d() != params_t.d() {
        return invalid("batch and parameters disagree on dimension");
    }
    let centers = params_t.expanded();
    let total = chunked_sum(
        1,
        batch.len(),
        RngSeed::new(0, 0),
        || KScratch::new(centers.nrows(), batch.d()),
        |s, _, i, out| out[0] = loss_kernel(&centers, batch.z().row(i), batch.xt().row(i), ib, s),
    );
    Ok(total[0] / batch.len() as f64)
}

/// Symmetric-pair gradient with respect to `μ_t` at one row.
pub fn pointwise_grad_two(
    mu_t: &[f64],
    row: BatchRow<'_>,
    scale: NoiseScale,
) -> Result<GradSample> {
    let ib = inv_beta(scale)?;
    check_row(mu_t.len(), &row)?;
    let mut grad = Matrix::zeros(1, mu_t.len());
    let loss = grad_two_kernel(mu_t, row.z, row.xt, ib, grad.row_mut(0));
    Ok(GradSample { grad, loss })
}

/// Gradient with respect to every center of `theta_t`, treating the
/// expanded centers as independent (a symmetric pair yields two rows).
pub fn pointwise_grad_k(
    theta_t: &MixtureParams,
    row: BatchRow<'_>,
    scale: NoiseScale,
) -> Result<GradSample> {
    let ib = inv_beta(scale)?;
    check_row(theta_t.d(), &row)?;
    let centers = theta_t.expanded();
    let mut s = KScratch::new(centers.nrows(), theta_t.d());
    let mut grad = Matrix::zeros(centers.nrows(), theta_t.d());
    let loss = grad_k_kernel(&centers, row.z, row.xt, ib, &mut s, grad.as_mut_slice());
    Ok(GradSample { grad, loss })
}

/// Batch mean of the pointwise gradient with standard errors, flattened
/// row-major. A symmetric pair uses the single-vector form; anything else
/// uses the K-component form.
pub fn batch_grad(params_t: &MixtureParams, batch: &SampleBatch) -> Result<MeanEstimate> {
    let ib = inv_beta(batch.scale())?;
    if batch.is_empty() {
        return invalid("batch is empty");
    }
    if batch.d() != params_t.d() {
        return invalid("batch and parameters disagree on dimension");
    }
    let d = batch.d();
    if let Some(mu) = params_t.pair_center() {
        return Ok(chunked_mean(
            d,
            batch.len(),
            RngSeed::new(0, 0),
            || (),
            |_, _, i, out| {
                grad_two_kernel(mu, batch.z().row(i), batch.xt().row(i), ib, out);
            },
        ));
    }
    let centers = params_t.expanded();
    let k = centers.nrows();
    Ok(chunked_mean(
        k * d,
        batch.len(),
        RngSeed::new(0, 0),
        || KScratch::new(k, d),
        |s, _, i, out| {
            grad_k_kernel(&centers, batch.z().row(i), batch.xt().row(i), ib, s, out);
        },
    ))
}

fn check_pair(mu_t: &[f64], mu_star_t: &[f64], n_mc: usize) -> Result<()> {
    if mu_t.len() != mu_star_t.len() || mu_t.is_empty() {
        return invalid("mu_t and mu_star_t must be nonempty and equally long");
    }
    if n_mc == 0 {
        return invalid("n_mc must be positive");
    }
    Ok(())
}

/// Draws `x ~ N(mean, I)` into `x` and returns `μᵀx`.
fn draw_shifted(mean: &[f64], mu: &[f64], rng: &mut Rng, x: &mut [f64]) -> f64 {
    fill_normal(rng, x);
    for (xi, m) in x.iter_mut().zip(mean) {
        *xi += m;
    }
    dot(mu, x)
}

/// Monte Carlo estimate of the symmetric-pair population gradient, returned
/// as the **negative** gradient, in its Stein-simplified form
///
/// `E[(tanh(u) − ½tanh''(u)‖μ‖² + tanh'(u)u)x] − μ − E[tanh'(u)]μ`,
/// `x ~ N(μ*_t, I)`, `u = μ_tᵀx`.
pub fn population_grad_two_mc(
    mu_t: &[f64],
    mu_star_t: &[f64],
    n_mc: usize,
    rng: RngSeed,
) -> Result<MeanEstimate> {
    check_pair(mu_t, mu_star_t, n_mc)?;
    let d = mu_t.len();
    let mm = norm_sq(mu_t);
    Ok(chunked_mean(
        d,
        n_mc,
        rng,
        || vec![0.0; d],
        |x, rng, _, out| {
            let u = draw_shifted(mu_star_t, mu_t, rng, x);
            let td = TanhDerivatives::at(u);
            let cx = td.value - 0.5 * td.second * mm + td.first * u;
            for j in 0..d {
                out[j] = cx * x[j] - (1.0 + td.first) * mu_t[j];
            }
        },
    ))
}

/// Tolerance for the one-dimensional reductions below. The absolute floor
/// is tiny because high-noise gradients are themselves of order `‖μ‖³`.
fn reduction_tolerance() -> Tolerance {
    Tolerance {
        abs: 1e-300,
        rel: 1e-13,
        max_segments: 3000,
    }
}

/// Exact symmetric-pair negative population gradient, by reduction to two
/// one-dimensional Gaussian expectations.
///
/// Stein's lemma turns `E[h(u)x]` for `x ~ N(m, I)` into
/// `m·E[h(u)] + μ·E[h'(u)]` with `u ~ N(μᵀm, ‖μ‖²)`, so the negative
/// gradient is `c_m·m + c_μ·μ` where
/// `c_m = E[tanh − ½‖μ‖²tanh'' + u·tanh']` and
/// `c_μ = E[−tanh² − ½‖μ‖²tanh''' + u·tanh'']`.
pub fn population_grad_two_exact(mu_t: &[f64], mu_star_t: &[f64]) -> Result<Vec<f64>> {
    check_pair(mu_t, mu_star_t, 1)?;
    let mm = norm_sq(mu_t);
    let (mean, sd) = (dot(mu_t, mu_star_t), mm.sqrt());
    let tol = reduction_tolerance();
    let cm = gaussian_expectation(
        |u| {
            let td = TanhDerivatives::at(u);
            td.value - 0.5 * mm * td.second + u * td.first
        },
        mean,
        sd,
        &[0.0],
        tol,
    )
    .value;
    let cmu = gaussian_expectation(
        |u| {
            let td = TanhDerivatives::at(u);
            -td.value * td.value - 0.5 * mm * td.third + u * td.second
        },
        mean,
        sd,
        &[0.0],
        tol,
    )
    .value;
    Ok(mu_star_t
        .iter()
        .zip(mu_t)
        .map(|(m, u)| cm * m + cmu * u)
        .collect())
}

/// `F(μ, μ*) = 2⟨μ*, μ⟩μ* − 3‖μ‖²μ`, the high-noise approximation of the
/// negative gradient.
pub fn power_surrogate(mu_t: &[f64], mu_star_t: &[f64]) -> Vec<f64> {
    let c = 2.0 * dot(mu_star_t, mu_t);
    let mm = 3.0 * norm_sq(mu_t);
    mu_star_t
        .iter()
        .zip(mu_t)
        .map(|(s, m)| c * s - mm * m)
        .collect()
}

/// Comparison of the negative population gradient with [`power_surrogate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub grad_estimate: Vec<f64>,
    pub surrogate: Vec<f64>,
    /// `‖grad_estimate − surrogate‖`
    pub deviation: f64,
    /// `250√d‖μ‖⁵ + 10‖μ‖³‖μ*‖² + ε`
    pub bound: f64,
    /// Combined standard error of `grad_estimate`; zero for the exact form.
    pub mc_std_err: f64,
    /// `deviation ≤ bound + 5·mc_std_err`
    pub passed: bool,
}

pub fn surrogate_bound(mu_t: &[f64], mu_star_t: &[f64], eps_grad: f64) -> f64 {
    let m = norm(mu_t);
    250.0 * (mu_t.len() as f64).sqrt() * m.powi(5)
        + 10.0 * m.powi(3) * norm_sq(mu_star_t)
        + eps_grad
}

fn surrogate_report(
    mu_t: &[f64],
    mu_star_t: &[f64],
    grad: Vec<f64>,
    se: f64,
    eps_grad: f64,
) -> SurrogateReport {
    let surrogate = power_surrogate(mu_t, mu_star_t);
    let deviation = crate::linalg::dist(&grad, &surrogate);
    let bound = surrogate_bound(mu_t, mu_star_t, eps_grad);
    SurrogateReport {
        grad_estimate: grad,
        surrogate,
        deviation,
        bound,
        mc_std_err: se,
        passed: deviation <= bound + 5.0 * se,
    }
}

/// Surrogate deviation using the Monte Carlo population gradient.
pub fn surrogate_deviation(
    mu_t: &[f64],
    mu_star_t: &[f64],
    n_mc: usize,
    eps_grad: f64,
    rng: RngSeed,
) -> Result<SurrogateReport> {
    if !(eps_grad >= 0.0) {
        return invalid("eps_grad must be nonnegative");
    }
    let est = population_grad_two_mc(mu_t, mu_star_t, n_mc, rng)?;
    let se = est.combined_std_err();
    Ok(surrogate_report(mu_t, mu_star_t, est.mean, se, eps_grad))
}

/// Surrogate deviation using [`population_grad_two_exact`].
pub fn surrogate_deviation_exact(
    mu_t: &[f64],
    mu_star_t: &[f64],
    eps_grad: f64,
) -> Result<SurrogateReport> {
    if !(eps_grad >= 0.0) {
        return invalid("eps_grad must be nonnegative");
    }
    let grad = population_grad_two_exact(mu_t, mu_star_t)?;
    Ok(surrogate_report(mu_t, mu_star_t, grad, 0.0, eps_grad))
}

/// Monte Carlo estimate of the low-noise residual
/// `G(μ, μ*) = E[−½tanh''(u)‖μ‖²x + tanh'(u)u·x − tanh'(u)μ]`,
/// `x ~ N(μ*_t, I)`, `u = μ_tᵀx`.
pub fn g_function(
    mu_t: &[f64],
    mu_star_t: &[f64],
    n_mc: usize,
    rng: RngSeed,
) -> Result<MeanEstimate> {
    check_pair(mu_t, mu_star_t, n_mc)?;
    let d = mu_t.len();
    let mm = norm_sq(mu_t);
    Ok(chunked_mean(
        d,
        n_mc,
        rng,
        || vec![0.0; d],
        |x, rng, _, out| {
            let u = draw_shifted(mu_star_t, mu_t, rng, x);
            let td = TanhDerivatives::at(u);
            let cx = -0.5 * td.second * mm + td.first * u;
            for j in 0..d {
                out[j] = cx * x[j] - td.first * mu_t[j];
            }
        },
    ))
}

/// Exact `G` by the same Stein reduction as [`population_grad_two_exact`]:
/// `G = m·E[−½‖μ‖²tanh'' + u·tanh'] + μ·E[−½‖μ‖²tanh''' + u·tanh'']`.
pub fn g_function_exact(mu_t: &[f64], mu_star_t: &[f64]) -> Result<Vec<f64>> {
    check_pair(mu_t, mu_star_t, 1)?;
    let mm = norm_sq(mu_t);
    let (mean, sd) = (dot(mu_t, mu_star_t), mm.sqrt());
    let tol = reduction_tolerance();
    let cm = gaussian_expectation(
        |u| {
            let td = TanhDerivatives::at(u);
            -0.5 * mm * td.second + u * td.first
        },
        mean,
        sd,
        &[0.0],
        tol,
    )
    .value;
    let cmu = gaussian_expectation(
        |u| {
            let td = TanhDerivatives::at(u);
            -0.5 * mm * td.third + u * td.second
        },
        mean,
        sd,
        &[0.0],
        tol,
    )
    .value;
    Ok(mu_star_t
        .iter()
        .zip(mu_t)
        .map(|(m, u)| cm * m + cmu * u)
        .collect())
}

fn check_k_pair(theta_t: &MixtureParams, theta_star_t: &MixtureParams, n_mc: usize) -> Result<()> {
    if theta_t.d() != theta_star_t.d() {
        return invalid("parameter and truth dimensions differ");
    }
    if n_mc == 0 {
        return invalid("n_mc must be positive");
    }
    Ok(())
}

/// Per-sample K-component population terms at one draw `x` of `q_t`.
///
/// Writes into `grad` (k·d) the integrand of the population gradient,
/// `w_i[(μ_i − m̄) + a((m̄ − μ_i)ᵀa − 1 − S)]` with `a = x − μ_i` and
/// `S = Σ_j w_j‖μ_j‖² − ‖m̄‖²`, and into `em` (k·d) the gradient-EM
/// integrand `w_i a`.
fn population_k_terms(
    centers: &Matrix,
    x: &[f64],
    s: &mut KScratch,
    grad: &mut [f64],
    em: &mut [f64],
) {
    let d = x.len();
    softmax_weights(centers, x, &mut s.w);
    s.mbar.iter_mut().for_each(|v| *v = 0.0);
    let mut spread = 0.0;
    for (wi, c) in s.w.iter().zip(centers.rows()) {
        for (m, ci) in s.mbar.iter_mut().zip(c) {
            *m += wi * ci;
        }
        spread += wi * norm_sq(c);
    }
    spread -= norm_sq(&s.mbar);
    for (i, c) in centers.rows().enumerate() {
        let wi = s.w[i];
        let mut proj = 0.0;
        for j in 0..d {
            s.r[j] = x[j] - c[j];
            proj += (s.mbar[j] - c[j]) * s.r[j];
        }
        let coef = proj - 1.0 - spread;
        for j in 0..d {
            grad[i * d + j] = wi * ((c[j] - s.mbar[j]) + s.r[j] * coef);
            em[i * d + j] = wi * s.r[j];
        }
    }
}

/// Monte Carlo population gradient (positive) for every center at once,
/// flattened `k·d` row-major. `X_t` is drawn from the mixture `theta_star_t`.
pub fn population_grad_k_all_mc(
    theta_t: &MixtureParams,
    theta_star_t: &MixtureParams,
    n_mc: usize,
    rng: RngSeed,
) -> Result<MeanEstimate> {
    check_k_pair(theta_t, theta_star_t, n_mc)?;
    let centers = theta_t.expanded();
    let (k, d) = (centers.nrows(), theta_t.d());
    Ok(chunked_mean(
        k * d,
        n_mc,
        rng,
        || (KScratch::new(k, d), vec![0.0; d], vec![0.0; k * d]),
        |(s, x, em), rng, _, out| {
            sample_into(theta_star_t, rng, x);
            population_k_terms(&centers, x, s, out, em);
        },
    ))
}

/// Monte Carlo population gradient (positive) for one center
/// (`component` is zero-based).
pub fn population_grad_k_mc(
    theta_t: &MixtureParams,
    theta_star_t: &MixtureParams,
    component: usize,
    n_mc: usize,
    rng: RngSeed,
) -> Result<MeanEstimate> {
    if component >= theta_t.k() {
        return invalid(format!(
            "component {component} out of range for k = {}",
            theta_t.k()
        ));
    }
    let all = population_grad_k_all_mc(theta_t, theta_star_t, n_mc, rng)?;
    let d = theta_t.d();
    let range = component * d..(component + 1) * d;
    Ok(MeanEstimate {
        mean: all.mean[range.clone()].to_vec(),
        std_err: all.std_err[range].to_vec(),
        n: all.n,
    })
}

/// Paired comparison of the population gradient with the gradient-EM
/// direction, from the same draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEmComparison {
    /// Population gradient, flattened `k·d`.
    pub gradient: MeanEstimate,
    /// `E[w_i(X)(X − μ_i)]`, flattened `k·d`.
    pub em_direction: MeanEstimate,
    /// `gradient + em_direction` with paired standard errors.
    pub gap: MeanEstimate,
}

pub fn gradient_em_comparison(
    theta_t: &MixtureParams,
    theta_star_t: &MixtureParams,
    n_mc: usize,
    rng: RngSeed,
) -> Result<GradEmComparison> {
    check_k_pair(theta_t, theta_star_t, n_mc)?;
    let centers = theta_t.expanded();
    let (k, d) = (centers.nrows(), theta_t.d());
    let kd = k * d;
    let all = chunked_mean(
        3 * kd,
        n_mc,
        rng,
        || (KScratch::new(k, d), vec![0.0; d]),
        |(s, x), rng, _, out| {
            sample_into(theta_star_t, rng, x);
            let (grad, rest) = out.split_at_mut(kd);
            let (em, gap) = rest.split_at_mut(kd);
            population_k_terms(&centers, x, s, grad, em);
            for j in 0..kd {
                gap[j] = grad[j] + em[j];
            }
        },
    );
    let part = |p: usize| MeanEstimate {
        mean: all.mean[p * kd..(p + 1) * kd].to_vec(),
        std_err: all.std_err[p * kd..(p + 1) * kd].to_vec(),
        n: all.n,
    };
    Ok(GradEmComparison {
        gradient: part(0),
        em_direction: part(1),
        gap: part(2),
    })
}
