//! Equal-weight, identity-covariance Gaussian mixtures: parameters,
//! sampling, the forward noising process, student scores and the reverse
//! sampler.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{norm_sq, Matrix};
use crate::rng::RngSeed;

/// Centers of a `k`-component mixture `(1/k) Σ N(μ_i, I_d)`.
///
/// A symmetric pair `½N(μ, I) + ½N(−μ, I)` stores only `μ`; it reports
/// `k() == 2` and both centers are derived from the single row on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct MixtureParams {
    centers: Matrix,
    symmetric_pair: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    #[serde(default)]
    symmetric_pair: bool,
    centers: Matrix,
}

impl TryFrom<MixtureRepr> for MixtureParams {
    type Error = Error;

    fn try_from(r: MixtureRepr) -> Result<Self> {
        let p = if r.symmetric_pair {
            if r.centers.nrows() != 1 {
                return invalid("a symmetric pair stores exactly one center row");
            }
            MixtureParams::symmetric(r.centers.row(0).to_vec())?
        } else {
            MixtureParams::new(r.centers)?
        };
        if r.k.is_some_and(|k| k != p.k()) || r.d.is_some_and(|d| d != p.d()) {
            return invalid(format!(
                "declared k/d do not match centers (found k={}, d={})",
                p.k(),
                p.d()
            ));
        }
        Ok(p)
    }
}

impl From<MixtureParams> for MixtureRepr {
    fn from(p: MixtureParams) -> Self {
        MixtureRepr {
            k: Some(p.k()),
            d: Some(p.d()),
            symmetric_pair: p.symmetric_pair,
            centers: p.centers,
        }
    }
}

impl MixtureParams {
    /// General mixture whose rows are the centers.
    pub fn new(centers: Matrix) -> Result<Self> {
        if centers.nrows() == 0 || centers.ncols() == 0 {
            return invalid("a mixture needs k >= 1 and d >= 1");
        }
        if !centers.is_finite() {
            return invalid("mixture centers must be finite");
        }
        Ok(Self {
            centers,
            symmetric_pair: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// The pair `½N(μ, I) + ½N(−μ, I)`.
    pub fn symmetric(mu: Vec<f64>) -> Result<Self> {
        let d = mu.len();
        let mut p = Self::new(Matrix::from_vec(1, d, mu)?)?;
        p.symmetric_pair = true;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        if self.symmetric_pair {
            2
        } else {
            self.centers.nrows()
        }
    }

    pub fn d(&self) -> usize {
        self.centers.ncols()
    }

    pub fn is_symmetric_pair(&self) -> bool {
        self.symmetric_pair
    }

    /// The stored rows: one row for a symmetric pair, `k` otherwise.
    pub fn stored_centers(&self) -> &Matrix {
        &self.centers
    }

    /// The single stored vector of a symmetric pair.
    pub fn pair_center(&self) -> Option<&[f64]> {
        self.symmetric_pair.then(|| self.centers.row(0))
    }

    /// All `k` centers as rows; for a symmetric pair the rows are `μ, −μ`.
    pub fn expanded(&self) -> Matrix {
        if self.symmetric_pair {
            let mu = self.centers.row(0);
            let mut data = mu.to_vec();
            data.extend(mu.iter().map(|v| -v));
            Matrix::from_vec(2, mu.len(), data).expect("shape is consistent")
        } else {
            self.centers.clone()
        }
    }

    /// Same structure with new stored rows.
    pub fn with_stored_centers(&self, centers: Matrix) -> Result<Self> {
        if centers.nrows() != self.centers.nrows() || centers.ncols() != self.centers.ncols() {
            return invalid("replacement centers have the wrong shape");
        }
        let mut p = Self::new(centers)?;
        p.symmetric_pair = self.symmetric_pair;
        Ok(p)
    }

    /// Every center multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            centers: self.centers.scaled(factor),
            symmetric_pair: self.symmetric_pair,
        }
    }
}

/// A diffusion time with its forward-process coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseScale {
    pub t: f64,
    /// `exp(−t)`
    pub alpha: f64,
    /// `sqrt(1 − exp(−2t))`
    pub beta: f64,
}

impl NoiseScale {
    pub fn new(t: f64) -> Result<Self> {
        if !t.is_finite() || t < 0.0 {
            return invalid(format!("noise time must be finite and >= 0, got {t}"));
        }
        // expm1 keeps beta accurate for small t
        Ok(Self {
            t,
            alpha: (-t).exp(),
            beta: (-(-2.0 * t).exp_m1()).sqrt(),
        })
    }
}

pub fn make_noise_scale(t: f64) -> Result<NoiseScale> {
    NoiseScale::new(t)
}

/// Aligned clean draws, noise draws and noised samples at one scale.
///
/// `xt` is always computed from the other two and cannot be set directly.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    scale: NoiseScale,
    x0: Matrix,
    z: Matrix,
    xt: Matrix,
}

/// One row of a [`SampleBatch`].
#[derive(Clone, Copy, Debug)]
pub struct BatchRow<'a> {
    pub x0: &'a [f64],
    pub z: &'a [f64],
    pub xt: &'a [f64],
}

impl SampleBatch {
    /// Builds a batch from explicit clean and noise draws.
    pub fn from_parts(x0: Matrix, z: Matrix, scale: NoiseScale) -> Result<Self> {
        if x0.nrows() != z.nrows() || x0.ncols() != z.ncols() {
            return invalid("x0 and z must have the same shape");
        }
        let mut xt = Matrix::zeros(x0.nrows(), x0.ncols());
        for (o, (a, b)) in xt
            .as_mut_slice()
            .iter_mut()
            .zip(x0.as_slice().iter().zip(z.as_slice()))
        {
            *o = scale.alpha * a + scale.beta * b;
        }
        Ok(Self { scale, x0, z, xt })
    }

    pub fn scale(&self) -> NoiseScale {
        self.scale
    }

    pub fn x0(&self) -> &Matrix {
        &self.x0
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn xt(&self) -> &Matrix {
        &self.xt
    }

    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d(&self) -> usize {
        self.x0.ncols()
    }

    pub fn row(&self, i: usize) -> BatchRow<'_> {
        BatchRow {
            x0: self.x0.row(i),
            z: self.z.row(i),
            xt: self.xt.row(i),
        }
    }
}

pub(crate) fn fill_normal(rng: &mut crate::rng::Rng, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

/// Draws one sample of the mixture into `out`.
pub(crate) fn sample_into(params: &MixtureParams, rng: &mut crate::rng::Rng, out: &mut [f64]) {
    fill_normal(rng, out);
    if params.symmetric_pair {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for (o, m) in out.iter_mut().zip(params.centers.row(0)) {
            *o += sign * m;
        }
    } else {
        let i = rng.random_range(0..params.centers.nrows());
        for (o, m) in out.iter_mut().zip(params.centers.row(i)) {
            *o += m;
        }
    }
}

/// `n` independent draws, one per row.
pub fn sample_mixture(params: &MixtureParams, n: usize, rng: RngSeed) -> Result<Matrix> {
    if n == 0 {
        return invalid("sample count must be positive");
    }
    let mut r = rng.rng();
    let mut out = Matrix::zeros(n, params.d());
    for i in 0..n {
        sample_into(params, &mut r, out.row_mut(i));
    }
    Ok(out)
}

/// Noises clean samples at `scale` with fresh standard normal `z`.
pub fn forward_noise(x0: &Matrix, scale: NoiseScale, rng: RngSeed) -> Result<SampleBatch> {
    let mut r = rng.rng();
    let mut z = Matrix::zeros(x0.nrows(), x0.ncols());
    fill_normal(&mut r, z.as_mut_slice());
    SampleBatch::from_parts(x0.clone(), z, scale)
}

/// Centers of the noised mixture `q_t`: every center times `exp(−t)`.
pub fn rescale_centers(params: &MixtureParams, t: f64) -> Result<MixtureParams> {
    let scale = NoiseScale::new(t)?;
    Ok(params.scaled(scale.alpha))
}

/// Softmax of `−‖x − μ_i‖²/2` over the rows of `centers`, written to `w`.
pub(crate) fn softmax_weights(centers: &Matrix, x: &[f64], w: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (wi, c) in w.iter_mut().zip(centers.rows()) {
        let logit = -0.5 * c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        *wi = logit;
        max = max.max(logit);
    }
    let mut total = 0.0;
    for wi in w.iter_mut() {
        *wi = (*wi - max).exp();
        total += *wi;
    }
    for wi in w.iter_mut() {
        *wi /= total;
    }
}

/// Posterior component probabilities at `x` under `params_t`.
pub fn posterior_weights(params_t: &MixtureParams, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(params_t, x)?;
    let centers = params_t.expanded();
    let mut w = vec![0.0; centers.nrows()];
    softmax_weights(&centers, x, &mut w);
    Ok(w)
}

/// `Σ w_i(x) μ_i − x` written to `out`, with weights left in `w`.
pub(crate) fn score_into(centers: &Matrix, x: &[f64], w: &mut [f64], out: &mut [f64]) {
    softmax_weights(centers, x, w);
    for (o, xi) in out.iter_mut().zip(x) {
        *o = -xi;
    }
    for (wi, c) in w.iter().zip(centers.rows()) {
        for (o, ci) in out.iter_mut().zip(c) {
            *o += wi * ci;
        }
    }
}

/// The student score `s_θ(x) = Σ w_i(x) μ_i − x`.
///
/// Evaluated at the true centers of `q_t` this is `∇ log q_t`.
pub fn student_score(params_t: &MixtureParams, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(params_t, x)?;
    let centers = params_t.expanded();
    let mut w = vec![0.0; centers.nrows()];
    let mut out = vec![0.0; x.len()];
    score_into(&centers, x, &mut w, &mut out);
    Ok(out)
}

fn check_dim(params: &MixtureParams, x: &[f64]) -> Result<()> {
    if x.len() != params.d() {
        return invalid(format!(
            "point has dimension {}, mixture has {}",
            x.len(),
            params.d()
        ));
    }
    Ok(())
}

/// Euler–Maruyama for the reverse process with a caller-supplied score.
///
/// Starts from standard normal draws at time `horizon` and steps backwards
/// on a uniform grid. The drift at grid time `τ` is `x + 2·score(τ, x)`;
/// `score(τ, x, out)` must write the score of `q_τ` at `x`.
pub fn reverse_sample_with<S>(
    mut score: S,
    d: usize,
    horizon: f64,
    n: usize,
    steps: usize,
    rng: RngSeed,
) -> Result<Matrix>
where
    S: FnMut(f64, &[f64], &mut [f64]),
{
    if n == 0 {
        return invalid("sample count must be positive");
    }
    if steps == 0 {
        return invalid("step count must be positive");
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return invalid("terminal time must be positive and finite");
    }
    let h = horizon / steps as f64;
    let diffusion = (2.0 * h).sqrt();
    let mut r = rng.rng();
    let mut x = Matrix::zeros(n, d);
    fill_normal(&mut r, x.as_mut_slice());
    let mut s = vec![0.0; d];
    for j in 0..steps {
        let tau = horizon - j as f64 * h;
        for i in 0..n {
            let row = x.row_mut(i);
            score(tau, row, &mut s);
            for (xi, si) in row.iter_mut().zip(&s) {
                let noise: f64 = r.sample(StandardNormal);
                *xi += h * (*xi + 2.0 * si) + diffusion * noise;
            }
        }
    }
    Ok(x)
}

/// Reverse-process samples using the exact score of the mixture `params`
/// (given at `t = 0`), rescaled analytically to each grid time.
pub fn reverse_sample(
    params: &MixtureParams,
    horizon: f64,
    n: usize,
    steps: usize,
    rng: RngSeed,
) -> Result<Matrix> {
    let centers = params.expanded();
    let mut w = vec![0.0; centers.nrows()];
    let mut scaled = centers.clone();
    reverse_sample_with(
        |tau, x, out| {
            let a = (-tau).exp();
            for (s, c) in scaled.as_mut_slice().iter_mut().zip(centers.as_slice()) {
                *s = a * c;
            }
            score_into(&scaled, x, &mut w, out);
        },
        params.d(),
        horizon,
        n,
        steps,
        rng,
    )
}

/// `R = sqrt(max(0, mean ‖x‖² − d))`, an estimate of the center norm of a
/// symmetric pair.
pub fn estimate_center_norm(x0: &Matrix) -> Result<f64> {
    if x0.nrows() == 0 {
        return invalid("need at least one sample");
    }
    let mean_sq = x0.rows().map(norm_sq).sum::<f64>() / x0.nrows() as f64;
    Ok((mean_sq - x0.ncols() as f64).max(0.0).sqrt())
}
