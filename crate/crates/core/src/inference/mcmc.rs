//! Metropolis-Hastings reference sampler.
//!
//! Each iteration makes a joint move, a random-walk step on the
//! hyperparameters followed by a latent proposal from the Laplace
//! approximation at the new hyperparameters, and then a latent-only
//! independence move at the current hyperparameters. Both are corrected
//! against the exact joint density, so the chain targets the exact posterior.

use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::grid::{locate_mode, GridConfig};
use super::laplace::{LaplaceEngine, LaplacePoint};
use super::{Draws, ModelSpec};
use crate::error::{Error, Result};
use crate::rng::{self, labels, SimRng};

/// Sampler settings.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub chains: usize,
    /// Iterations kept per chain after burn-in (before thinning).
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Random-walk scale relative to the Laplace standard deviations.
    pub initial_scale: f64,
    /// Tune the scale during burn-in towards `target_accept`.
    pub adapt: bool,
    pub target_accept: f64,
    /// Largest acceptable split potential-scale-reduction factor.
    pub rhat_threshold: f64,
    /// Settings for locating the hyperparameter mode and axes.
    pub grid: GridConfig,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 4000,
            burn_in: 1000,
            thin: 2,
            initial_scale: 1.0,
            adapt: true,
            target_accept: 0.3,
            rhat_threshold: 1.05,
            grid: GridConfig::default(),
        }
    }
}

/// Pooled post-burn-in draws with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcResult {
    /// Draws from all chains; `theta_index` holds the chain number.
    pub draws: Draws,
    /// Split R-hat of every hyperparameter then every latent coordinate.
    pub rhat: Vec<f64>,
    pub max_rhat: f64,
    /// Joint-move acceptance rate per chain after burn-in.
    pub acceptance: Vec<f64>,
}

/// Split-chain potential scale reduction factor. Fails when the pooled
/// within-chain variance is zero, which a constant chain cannot diagnose.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let half = chains.iter().map(|c| c.len() / 2).min().unwrap_or(0);
    if chains.is_empty() || half < 2 {
        return Err(Error::Diagnostics(String::from("chains too short for split R-hat")));
    }
    let mut parts: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        parts.push(&c[..half]);
        parts.push(&c[c.len() - half..]);
    }
    let n = half as f64;
    let m = parts.len() as f64;
    let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|v| (v - grand) * (v - grand)).sum::<f64>();
    let w = parts
        .iter()
        .zip(&means)
        .map(|(p, mu)| p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if !(w > 0.0) {
        return Err(Error::Diagnostics(String::from("zero within-chain variance (chain never moves)")));
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

fn normals(rng: &mut SimRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

struct State {
    theta: Vec<f64>,
    x: Vec<f64>,
    log_weight: f64,
    approx: LaplacePoint,
}

fn propose(engine: &LaplaceEngine<'_>, approx: LaplacePoint, rng: &mut SimRng) -> Result<State> {
    let n = engine.spec().n_latent();
    let x = approx.sample_with(&normals(rng, n));
    let log_weight = engine.log_joint(&approx.theta, &x)? - approx.ln_gaussian(&x);
    Ok(State { theta: approx.theta.clone(), x, log_weight, approx })
}

/// Runs several chains from overdispersed starts and checks split R-hat.
pub fn mcmc_oracle(spec: &ModelSpec, cfg: &McmcConfig, seed: u64) -> Result<McmcResult> {
    if cfg.chains == 0 || cfg.thin == 0 || cfg.iterations == 0 {
        return Err(Error::Config(String::from("chains, iterations and thin must be positive")));
    }
    let engine = LaplaceEngine::new(spec, cfg.grid.newton)?;
    let d = spec.n_hyper();
    let (theta_mode, axes, centre) = if d == 0 {
        (Vec::new(), Vec::new(), engine.laplace(&[], None)?)
    } else {
        let loc = locate_mode(&engine, &cfg.grid)?;
        (loc.theta, loc.axes, loc.centre)
    };
    let step_of = |z: &[f64]| -> Vec<f64> { (0..d).map(|i| (0..d).map(|j| axes[j][i] * z[j]).sum()).collect() };

    let mut draws = Draws { latent: Vec::new(), theta: Vec::new(), theta_index: Vec::new() };
    let mut traces: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut acceptance = Vec::new();
    for c in 0..cfg.chains {
        let mut rng = rng::rng_for(seed, &[labels::FIT, 0x4d43, c as u64]);
        let start_step = step_of(&normals(&mut rng, d));
        let theta0: Vec<f64> = theta_mode.iter().zip(&start_step).map(|(a, b)| a + b).collect();
        let approx0 = match engine.laplace(&theta0, Some(&centre.mode)) {
            Ok(p) => p,
            Err(_) => centre.clone(),
        };
        let mut state = propose(&engine, approx0, &mut rng)?;
        let mut scale = cfg.initial_scale * if d > 0 { 2.38 / (d as f64).sqrt() } else { 0.0 };
        let (mut window_acc, mut window_n) = (0usize, 0usize);
        let (mut kept_acc, mut kept_n) = (0usize, 0usize);
        let mut trace = Vec::new();
        for it in 0..cfg.burn_in + cfg.iterations {
            if d > 0 && scale > 0.0 {
                let step = step_of(&normals(&mut rng, d));
                let theta_new: Vec<f64> = state.theta.iter().zip(&step).map(|(a, b)| a + scale * b).collect();
                let mut accepted = false;
                if let Ok(p) = engine.laplace(&theta_new, Some(&state.approx.mode)) {
                    if let Ok(cand) = propose(&engine, p, &mut rng) {
                        let u: f64 = rng.random();
                        if cand.log_weight.is_finite() && u.ln() < cand.log_weight - state.log_weight {
                            state = cand;
                            accepted = true;
                        }
                    }
                }
                if it < cfg.burn_in {
                    window_acc += accepted as usize;
                    window_n += 1;
                    if cfg.adapt && window_n == 50 {
                        let rate = window_acc as f64 / window_n as f64;
                        scale *= (2.0 * (rate - cfg.target_accept)).exp();
                        window_acc = 0;
                        window_n = 0;
                    }
                } else {
                    kept_acc += accepted as usize;
                    kept_n += 1;
                }
            }
            let cand = propose(&engine, state.approx.clone(), &mut rng)?;
            let u: f64 = rng.random();
            if cand.log_weight.is_finite() && u.ln() < cand.log_weight - state.log_weight {
                state = cand;
            }
            if it >= cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0 {
                let mut row = state.theta.clone();
                row.extend_from_slice(&state.x);
                trace.push(row);
                draws.latent.push(state.x.clone());
                draws.theta.push(state.theta.clone());
                draws.theta_index.push(c);
            }
        }
        acceptance.push(if kept_n > 0 { kept_acc as f64 / kept_n as f64 } else { 0.0 });
        traces.push(trace);
    }

    let width = d + spec.n_latent();
    let mut rhat = Vec::with_capacity(width);
    for k in 0..width {
        let chains: Vec<Vec<f64>> = traces.iter().map(|t| t.iter().map(|row| row[k]).collect()).collect();
        let r = split_rhat(&chains).map_err(|e| match e {
            Error::Diagnostics(msg) => Error::Diagnostics(alloc::format!("quantity {k}: {msg}")),
            other => other,
        })?;
        rhat.push(r);
    }
    let max_rhat = rhat.iter().fold(0.0f64, |a, &v| a.max(v));
    if !(max_rhat <= cfg.rhat_threshold) {
        return Err(Error::Diagnostics(alloc::format!(
            "split R-hat {max_rhat:.4} exceeds {}",
            cfg.rhat_threshold
        )));
    }
    Ok(McmcResult { draws, rhat, max_rhat, acceptance })
}
