//! Learning Gaussian mixture centers by gradient descent on the denoising
//! diffusion (score-matching) objective.
//!
//! The student score for a mixture with centers `μ_i` at noise time `t` is
//! `s(x) = Σ w_i(x) μ_{i,t} − x` with softmax posterior weights, and the
//! per-sample loss is `‖s(x_t) + z/β_t‖²` where `x_t = α_t x₀ + β_t z`.
//!
//! * [`mixture`]: mixture parameters, sampling, forward noise, scores.
//! * [`objective`]: the loss and all gradient forms.
//! * [`optim`]: gradient descent drivers (two-stage, projected, warm-start).
//! * [`baselines`]: EM, gradient EM and power iteration.
//! * [`diagnostics`]: numerical checks with Monte Carlo error accounting.

pub mod baselines;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod mixture;
pub mod objective;
pub mod optim;
pub mod quadrature;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use mixture::{
    estimate_center_norm, forward_noise, make_noise_scale, posterior_weights, rescale_centers,
    reverse_sample, reverse_sample_with, sample_mixture, student_score, BatchRow, MixtureParams,
    NoiseScale, SampleBatch,
};
pub use rng::RngSeed;
pub use stats::MeanEstimate;
