#![allow(dead_code)]

use gmm_ddpm::linalg::Matrix;
use gmm_ddpm::{MixtureParams, NoiseScale, SampleBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Test-side RNG, deliberately a different generator from the library's.
pub fn test_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha20Rng, d: usize, sd: f64) -> Vec<f64> {
    (0..d)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Composite Simpson rule for `E[f(X)]`, `X ~ N(mean, sd²)`, on ±12 sd.
pub fn simpson_gaussian(f: impl Fn(f64) -> f64, mean: f64, sd: f64) -> f64 {
    let n = 40_000;
    let (a, b) = (-12.0, 12.0);
    let h = (b - a) / n as f64;
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let g = |z: f64| phi(z) * f(mean + sd * z);
    let mut s = g(a) + g(b);
    for i in 1..n {
        let z = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 * g(z) } else { 2.0 * g(z) };
    }
    s * h / 3.0
}

/// One-row batch built from explicit `x0` and `z`.
pub fn single_row(x0: &[f64], z: &[f64], scale: NoiseScale) -> SampleBatch {
    let d = x0.len();
    SampleBatch::from_parts(
        Matrix::from_vec(1, d, x0.to_vec()).unwrap(),
        Matrix::from_vec(1, d, z.to_vec()).unwrap(),
        scale,
    )
    .unwrap()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-8)
}

pub fn general(rows: &[Vec<f64>]) -> MixtureParams {
    MixtureParams::from_rows(rows).unwrap()
}
