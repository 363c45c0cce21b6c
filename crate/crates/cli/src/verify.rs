//! `verify`: the diagnostics suite.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Result};
use gmm_ddpm::diagnostics::*;
use gmm_ddpm::{make_noise_scale, MixtureParams, RngSeed};
use serde::{Deserialize, Serialize};

use crate::fit::warm_init;

/// Names accepted by `--check`, in run order.
pub const CHECKS: &[&str] = &[
    "gradient_fd",
    "stein",
    "stationarity",
    "power_deviation",
    "angle_step",
    "g_contraction",
    "center_norm",
    "init_correlation",
    "cross_weights",
    "grad_em_equiv",
];

/// One line of `checks.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub check: String,
    pub case: String,
    /// Set for control cases, which are built to fall outside a regime (or
    /// to break an assumption) and must report that outcome.
    pub expected: Option<Outcome>,
    /// False only for a failed check, or a control with the wrong outcome.
    pub ok: bool,
    #[serde(flatten)]
    pub report: CheckReport,
}

impl CheckLine {
    fn new(check: &str, case: impl Into<String>, report: CheckReport) -> Self {
        Self {
            check: check.to_string(),
            case: case.into(),
            expected: None,
            ok: report.outcome != Outcome::Fail,
            report,
        }
    }

    fn control(
        check: &str,
        case: impl Into<String>,
        report: CheckReport,
        expected: Outcome,
    ) -> Self {
        Self {
            check: check.to_string(),
            case: case.into(),
            expected: Some(expected),
            ok: report.outcome == expected,
            report,
        }
    }
}

/// Seed for the `index`-th case of a check.
fn case_seed(base: u64, check: usize, index: u64) -> RngSeed {
    RngSeed::new(base, 1000 + check as u64).substream(index)
}

/// Runs one named check.
pub fn run_check(name: &str, n_mc: usize, seed: u64) -> Result<Vec<CheckLine>> {
    let Some(idx) = CHECKS.iter().position(|c| *c == name) else {
        bail!("unknown check `{name}` (known: {})", CHECKS.join(", "));
    };
    let s = |i: u64| case_seed(seed, idx, i);
    let mut out = Vec::new();
    match name {
        "gradient_fd" => out.push(CheckLine::new(
            name,
            "100 configurations",
            check_gradient_fd(100, s(0))?,
        )),
        "stein" => {
            let mut r = s(0).rng();
            let mut i = 0;
            'outer: for k in [2usize, 3, 5] {
                for d in [2usize, 4, 8] {
                    for t in [0.1, 0.5, 1.0] {
                        if i == 20 {
                            break 'outer;
                        }
                        let scale = make_noise_scale(t)?;
                        let star = random_centers(&mut r, k, d, 1.5)?;
                        let theta_t = perturbed(&mut r, &star.scaled(scale.alpha), 0.3)?;
                        let rep = check_stein(
                            SteinTarget::K {
                                theta_t: &theta_t,
                                theta_star: &star,
                            },
                            scale,
                            n_mc,
                            n_mc,
                            s(1 + i),
                        )?;
                        out.push(CheckLine::new(name, format!("k={k} d={d} t={t}"), rep));
                        i += 1;
                    }
                }
            }
        }
        "stationarity" => {
            let d = 8usize;
            for k in [2usize, 4] {
                let star = separated_centers(k, d, 3.0, s(0))?;
                for (j, t) in [0.1, 1.0, (d as f64).ln()].into_iter().enumerate() {
                    let rep = check_stationarity(
                        &star,
                        make_noise_scale(t)?,
                        n_mc,
                        s(10 * k as u64 + j as u64),
                    )?;
                    out.push(CheckLine::new(name, format!("k={k} t={t:.4}"), rep));
                }
            }
        }
        "power_deviation" => {
            let grid = high_noise_grid(8, 10, s(0));
            out.push(CheckLine::new(
                name,
                "exact gradient, d=8",
                check_power_deviation_exact(&grid, 0.0)?,
            ));
            let mc = check_power_deviation(&grid, n_mc, 0.0, s(1))?;
            out.push(CheckLine::new(
                name,
                format!("monte carlo gradient, n={n_mc}, d=8"),
                mc,
            ));
        }
        "angle_step" => {
            for (i, (mu, star)) in angle_step_instances(8, 20, s(0)).iter().enumerate() {
                let rep = check_angle_step(mu, star, 0.05, GradientSource::Exact, s(1 + i as u64))?;
                out.push(CheckLine::new(name, format!("instance {i}"), rep));
            }
        }
        "g_contraction" => {
            for d in [1usize, 2, 8] {
                let rep = check_g_contraction(&g_contraction_grid(d), n_mc, s(d as u64))?;
                let how = if d == 1 { "quadrature" } else { "monte carlo" };
                out.push(CheckLine::new(name, format!("d={d} ({how})"), rep));
            }
        }
        "center_norm" => {
            let mut star = vec![0.0; 8];
            star[0] = 2.0;
            let rep = check_center_norm(&star, 0.05, 100, 0.05, s(0))?;
            out.push(CheckLine::new(
                name,
                "|mu*|=2, d=8, eps=0.05, 100 datasets",
                rep,
            ));
        }
        "init_correlation" => {
            for d in [4usize, 25] {
                out.push(CheckLine::new(
                    name,
                    format!("d={d}"),
                    check_init_correlation(d, 2000, s(d as u64))?,
                ));
            }
        }
        "cross_weights" => {
            let star = separated_centers(4, 8, 6.0, s(0))?;
            let theta = warm_init(&star, 0.5, s(1))?;
            out.push(CheckLine::new(
                name,
                "K=4 d=8 separation 6",
                check_cross_weights(&theta, &star, n_mc, s(2))?,
            ));
            let zero = MixtureParams::new(gmm_ddpm::Matrix::zeros(4, 8))?;
            let rep = check_cross_weights(&zero, &zero, n_mc, s(3))?;
            out.push(CheckLine::control(
                name,
                "separation 0 control",
                rep,
                Outcome::Fail,
            ));
        }
        "grad_em_equiv" => {
            let scale = make_noise_scale(0.2)?;
            let star = separated_centers(4, 8, 6.0, s(0))?;
            let theta = warm_init(&star, 0.5, s(1))?;
            out.push(CheckLine::new(
                name,
                "K=4 d=8 separation 6, t=0.2",
                check_grad_em_equiv(&theta, &star, scale, n_mc, s(2))?,
            ));
            let close = separated_centers(4, 8, 1.0, s(3))?;
            let theta = warm_init(&close, 0.5, s(4))?;
            let rep = check_grad_em_equiv(&theta, &close, scale, n_mc, s(5))?;
            out.push(CheckLine::control(
                name,
                "separation 1 control",
                rep,
                Outcome::NotApplicable,
            ));
        }
        _ => unreachable!("listed in CHECKS"),
    }
    Ok(out)
}

fn random_centers(
    r: &mut gmm_ddpm::rng::Rng,
    k: usize,
    d: usize,
    sd: f64,
) -> Result<MixtureParams> {
    let mut m = gmm_ddpm::Matrix::zeros(k, d);
    for v in m.as_mut_slice() {
        *v = sd * rand_normal(r);
    }
    Ok(MixtureParams::new(m)?)
}

fn perturbed(r: &mut gmm_ddpm::rng::Rng, base: &MixtureParams, sd: f64) -> Result<MixtureParams> {
    let mut m = base.stored_centers().clone();
    for v in m.as_mut_slice() {
        *v += sd * rand_normal(r);
    }
    Ok(base.with_stored_centers(m)?)
}

fn rand_normal(r: &mut gmm_ddpm::rng::Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(r)
}

/// Runs the selected checks (all when `only` is empty), writes
/// `checks.jsonl` and returns the lines.
pub fn run_verify(only: &[String], n_mc: usize, seed: u64, out: &Path) -> Result<Vec<CheckLine>> {
    for name in only {
        if !CHECKS.contains(&name.as_str()) {
            bail!("unknown check `{name}` (known: {})", CHECKS.join(", "));
        }
    }
    let mut lines = Vec::new();
    for name in CHECKS
        .iter()
        .filter(|c| only.is_empty() || only.iter().any(|o| o == *c))
    {
        let start = std::time::Instant::now();
        let got = run_check(name, n_mc, seed)?;
        let bad = got.iter().filter(|l| !l.ok).count();
        eprintln!(
            "{name}: {} case(s), {} not ok ({:.1}s)",
            got.len(),
            bad,
            start.elapsed().as_secs_f64()
        );
        lines.extend(got);
    }
    let mut w = BufWriter::new(File::create(out.join("checks.jsonl"))?);
    for l in &lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(lines)
}
