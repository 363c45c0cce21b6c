//! Monte Carlo means with standard errors, reduced in fixed-size chunks.
//!
//! Work is split into chunks of [`CHUNK_SIZE`] items. Chunk `c` owns the
//! random stream `seed.substream(c)` and its partial result; partials are
//! merged sequentially in chunk order. The output therefore depends only on
//! the seed and the item count, never on how many threads ran the chunks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::norm;
use crate::rng::{Rng, RngSeed};

pub const CHUNK_SIZE: usize = 4096;

/// A vector-valued sample mean together with per-coordinate standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub n: usize,
}

impl MeanEstimate {
    /// Standard error of the whole vector: the root sum of squared
    /// coordinate errors. A "within k standard errors" comparison means
    /// `‖v‖ ≤ k · combined_std_err`.
    pub fn combined_std_err(&self) -> f64 {
        norm(&self.std_err)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.mean)
    }

    /// Difference of two independent estimates; errors add in quadrature.
    pub fn minus(&self, other: &MeanEstimate) -> MeanEstimate {
        MeanEstimate {
            mean: self
                .mean
                .iter()
                .zip(&other.mean)
                .map(|(a, b)| a - b)
                .collect(),
            std_err: self
                .std_err
                .iter()
                .zip(&other.std_err)
                .map(|(a, b)| a.hypot(*b))
                .collect(),
            n: self.n.min(other.n),
        }
    }

    pub fn negated(mut self) -> MeanEstimate {
        self.mean.iter_mut().for_each(|v| *v = -*v);
        self
    }
}

/// Streaming mean and centered second moment (Welford / Chan et al.).
#[derive(Clone, Debug)]
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta * inv;
            *s += delta * (v - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.n += other.n;
    }

    fn finish(self) -> MeanEstimate {
        let n = self.n;
        let std_err = self
            .m2
            .iter()
            .map(|&s| {
                if n < 2 {
                    f64::INFINITY
                } else {
                    (s / (n - 1) as f64 / n as f64).sqrt()
                }
            })
            .collect();
        MeanEstimate {
            mean: self.mean,
            std_err,
            n,
        }
    }
}

fn chunk_bounds(n: usize, c: usize) -> std::ops::Range<usize> {
    c * CHUNK_SIZE..((c + 1) * CHUNK_SIZE).min(n)
}

/// Mean and standard error of `f` over items `0..n`.
///
/// `f(scratch, rng, index, out)` writes one `dim`-vector sample into `out`.
/// `init` builds per-chunk scratch space. `rng` is the chunk's stream.
pub fn chunked_mean<S, I, F>(dim: usize, n: usize, seed: RngSeed, init: I, f: F) -> MeanEstimate
where
    I: Fn() -> S + Sync,
    F: Fn(&mut S, &mut Rng, usize, &mut [f64]) + Sync,
{
    let parts: Vec<Moments> = (0..n.div_ceil(CHUNK_SIZE))
        .into_par_iter()
        .map(|c| {
            let mut rng = seed.substream(c as u64).rng();
            let mut scratch = init();
            let mut out = vec![0.0; dim];
            let mut m = Moments::new(dim);
            for i in chunk_bounds(n, c) {
                f(&mut scratch, &mut rng, i, &mut out);
                m.push(&out);
            }
            m
        })
        .collect();
    let mut total = Moments::new(dim);
    for p in &parts {
        total.merge(p);
    }
    total.finish()
}

/// Plain sum of `f` over items `0..n`, cheaper than [`chunked_mean`] when
/// no standard error is needed. Same chunking and stream layout.
pub fn chunked_sum<S, I, F>(dim: usize, n: usize, seed: RngSeed, init: I, f: F) -> Vec<f64>
where
    I: Fn() -> S + Sync,
    F: Fn(&mut S, &mut Rng, usize, &mut [f64]) + Sync,
{
    let parts: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK_SIZE))
        .into_par_iter()
        .map(|c| {
            let mut rng = seed.substream(c as u64).rng();
            let mut scratch = init();
            let mut out = vec![0.0; dim];
            let mut acc = vec![0.0; dim];
            for i in chunk_bounds(n, c) {
                f(&mut scratch, &mut rng, i, &mut out);
                for (a, o) in acc.iter_mut().zip(&out) {
                    *a += o;
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; dim];
    for p in &parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}
