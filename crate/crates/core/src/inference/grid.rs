//! Hyperparameter grid integration and posterior sampling.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::StandardNormal;

use super::laplace::{LaplaceEngine, NewtonConfig};
use super::{Draws, ModelSpec};
use crate::error::{Error, Result};
use crate::rng::{self, labels};

/// Grid construction settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    /// Points per hyperparameter on the standardized scale.
    pub points_per_dim: usize,
    /// Half-width of the grid in standard deviations.
    pub span: f64,
    /// Cap on the Cartesian product size; `points_per_dim` shrinks to fit.
    pub max_points: usize,
    /// Normalized weights below this are dropped.
    pub prune: f64,
    /// Bounds on the standard deviation along each principal direction.
    pub sd_bounds: (f64, f64),
    /// Evaluate a single point at these hyperparameters instead of a grid.
    pub fixed_theta: Option<Vec<f64>>,
    /// Finite-difference step for the Hessian of the log posterior.
    pub fd_step: f64,
    pub max_opt_iter: usize,
    pub newton: NewtonConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            points_per_dim: 15,
            span: 3.0,
            max_points: 3375,
            prune: 1e-6,
            sd_bounds: (0.01, 5.0),
            fixed_theta: None,
            fd_step: 0.02,
            max_opt_iter: 200,
            newton: NewtonConfig::default(),
        }
    }
}

impl GridConfig {
    pub fn fixed(theta: Vec<f64>) -> Self {
        Self { fixed_theta: Some(theta), ..Self::default() }
    }
}

/// One retained hyperparameter configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub theta: Vec<f64>,
    pub log_marginal: f64,
    pub log_prior: f64,
    pub weight: f64,
    pub mode: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Mixture-of-Gaussians posterior over the hyperparameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorFit {
    pub points: Vec<GridPoint>,
    pub hyper_names: Vec<String>,
    pub theta_mode: Vec<f64>,
    /// Principal directions scaled by their standard deviations (columns).
    pub theta_axes: Vec<Vec<f64>>,
    pub n_evaluated: usize,
    pub n_failed: usize,
    pub newton: NewtonConfig,
}

impl PosteriorFit {
    /// Grid points whose Newton iterations did not converge.
    pub fn n_nonconverged(&self) -> usize {
        self.points.iter().filter(|p| !p.converged).count()
    }

    /// Weighted average of the conditional modes.
    pub fn latent_mean(&self) -> Vec<f64> {
        let n = self.points.first().map_or(0, |p| p.mode.len());
        let mut out = vec![0.0; n];
        for p in &self.points {
            for (o, m) in out.iter_mut().zip(&p.mode) {
                *o += p.weight * m;
            }
        }
        out
    }

    pub fn theta_mean(&self) -> Vec<f64> {
        let d = self.hyper_names.len();
        let mut out = vec![0.0; d];
        for p in &self.points {
            for (o, t) in out.iter_mut().zip(&p.theta) {
                *o += p.weight * t;
            }
        }
        out
    }
}

fn log_posterior(engine: &LaplaceEngine<'_>, theta: &[f64], warm: &RefCell<Vec<f64>>) -> Option<f64> {
    let start = warm.borrow().clone();
    let p = engine.laplace(theta, Some(&start)).ok()?;
    let v = p.log_posterior();
    v.is_finite().then_some(v)
}

fn fd_gradient<F: FnMut(&[f64]) -> Option<f64>>(f: &mut F, x: &[f64], h: f64) -> Option<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Some(g)
}

/// Quasi-Newton (BFGS) maximization with finite-difference gradients.
fn maximize<F: FnMut(&[f64]) -> Option<f64>>(mut f: F, x0: &[f64], max_iter: usize) -> Result<(Vec<f64>, f64)> {
    let d = x0.len();
    let h = 1e-4;
    let mut x = x0.to_vec();
    let mut fx = f(&x).ok_or_else(|| Error::Divergence(alloc::format!("log posterior undefined at start {x0:?}")))?;
    let mut g = fd_gradient(&mut f, &x, h)
        .ok_or_else(|| Error::Divergence(String::from("log posterior undefined near the start")))?;
    let mut hinv = DMatrix::<f64>::identity(d, d);
    let mut fresh = true;
    for _ in 0..max_iter {
        if g.iter().fold(0.0f64, |a, v| a.max(v.abs())) < 1e-4 {
            break;
        }
        let gv = nalgebra::DVector::from_vec(g.clone());
        let mut p: Vec<f64> = (&hinv * &gv).iter().copied().collect();
        let pmax = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if pmax > 2.0 {
            p.iter_mut().for_each(|v| *v *= 2.0 / pmax);
        }
        let slope: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope > 0.0) {
            if fresh {
                break;
            }
            hinv = DMatrix::identity(d, d);
            fresh = true;
            continue;
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let xt: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + t * b).collect();
            if let Some(ft) = f(&xt) {
                if ft >= fx + 1e-4 * t * slope {
                    next = Some((xt, ft));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = next else {
            if fresh {
                break;
            }
            hinv = DMatrix::identity(d, d);
            fresh = true;
            continue;
        };
        let Some(gn) = fd_gradient(&mut f, &xn, h) else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        // Maximization: y is the change in the negative gradient.
        let y: Vec<f64> = g.iter().zip(&gn).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let sv = nalgebra::DVector::from_vec(s.clone());
            let yv = nalgebra::DVector::from_vec(y);
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(d, d);
            let left = &eye - rho * &sv * yv.transpose();
            let right = &eye - rho * &yv * sv.transpose();
            hinv = &left * &hinv * &right + rho * &sv * sv.transpose();
            fresh = false;
        }
        let step = s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        x = xn;
        fx = fnew;
        g = gn;
        if step < 1e-8 {
            break;
        }
    }
    Ok((x, fx))
}

/// Negative Hessian of `f` at `x` by central differences.
fn fd_neg_hessian<F: FnMut(&[f64]) -> Option<f64>>(f: &mut F, x: &[f64], f0: f64, h: f64) -> Option<DMatrix<f64>> {
    let d = x.len();
    let mut out = DMatrix::zeros(d, d);
    let mut xp = x.to_vec();
    for i in 0..d {
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        out[(i, i)] = -(fp - 2.0 * f0 + fm) / (h * h);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| -> Option<f64> {
                let mut xc = x.to_vec();
                xc[i] += si * h;
                xc[j] += sj * h;
                f(&xc)
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?) / (4.0 * h * h);
            out[(i, j)] = -v;
            out[(j, i)] = -v;
        }
    }
    Some(out)
}

fn lattice(d: usize, k: usize, span: f64) -> Vec<Vec<f64>> {
    let coords: Vec<f64> = if k == 1 {
        vec![0.0]
    } else {
        (0..k).map(|i| -span + 2.0 * span * i as f64 / (k - 1) as f64).collect()
    };
    let total = k.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            (0..d)
                .map(|_| {
                    let c = coords[idx % k];
                    idx /= k;
                    c
                })
                .collect()
        })
        .collect()
}

/// Posterior mode of the hyperparameters with principal axes scaled by the
/// (clamped) standard deviations of the quadratic approximation there.
pub(crate) struct ModeLocation {
    pub theta: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    pub centre: super::LaplacePoint,
}

pub(crate) fn locate_mode(engine: &LaplaceEngine<'_>, cfg: &GridConfig) -> Result<ModeLocation> {
    let spec = engine.spec();
    let d = spec.n_hyper();
    let init = spec.initial_theta();
    let warm = RefCell::new(engine.laplace(&init, None)?.mode);
    let mut f = |t: &[f64]| log_posterior(engine, t, &warm);
    let (theta_mode, f_mode) = maximize(&mut f, &init, cfg.max_opt_iter)?;
    let centre = engine.laplace(&theta_mode, Some(&warm.borrow()))?;
    *warm.borrow_mut() = centre.mode.clone();
    let mut f = |t: &[f64]| log_posterior(engine, t, &warm);
    let neg_h = fd_neg_hessian(&mut f, &theta_mode, f_mode, cfg.fd_step)
        .ok_or_else(|| Error::Divergence(String::from("log posterior undefined near its mode")))?;
    let eig = SymmetricEigen::new(neg_h);
    let (lo, hi) = cfg.sd_bounds;
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let lam = eig.eigenvalues[j];
            let sd = if lam > 0.0 { (1.0 / lam.sqrt()).clamp(lo, hi) } else { hi };
            (0..d).map(|i| eig.eigenvectors[(i, j)] * sd).collect()
        })
        .collect();
    Ok(ModeLocation { theta: theta_mode, axes, centre })
}

/// Fits a latent Gaussian model: posterior mode of the hyperparameters, a
/// standardized grid around it, and a Laplace approximation at every point.
pub fn fit_lgm(spec: &ModelSpec, cfg: &GridConfig) -> Result<PosteriorFit> {
    let engine = LaplaceEngine::new(spec, cfg.newton)?;
    let d = spec.n_hyper();
    let hyper_names = spec.hyper_names();
    let single = |theta: Vec<f64>| -> Result<PosteriorFit> {
        let p = engine.laplace(&theta, None)?;
        Ok(PosteriorFit {
            points: vec![GridPoint {
                theta: theta.clone(),
                log_marginal: p.log_marginal,
                log_prior: p.log_prior_theta,
                weight: 1.0,
                mode: p.mode.clone(),
                converged: p.converged,
                iterations: p.iterations,
                grad_norm: p.grad_norm,
            }],
            hyper_names: hyper_names.clone(),
            theta_mode: theta,
            theta_axes: Vec::new(),
            n_evaluated: 1,
            n_failed: 0,
            newton: cfg.newton,
        })
    };
    if let Some(theta) = &cfg.fixed_theta {
        if theta.len() != d {
            return Err(Error::Dimension(alloc::format!("fixed theta has {} entries, model has {d}", theta.len())));
        }
        return single(theta.clone());
    }
    if d == 0 {
        return single(Vec::new());
    }

    let located = locate_mode(&engine, cfg)?;
    let (theta_mode, axes) = (located.theta, located.axes);
    let centre = located.centre;

    let mut k = cfg.points_per_dim.max(1);
    while k > 1 && k.checked_pow(d as u32).is_none_or(|t| t > cfg.max_points) {
        k -= 1;
    }
    let zs = lattice(d, k, cfg.span);
    let mut evaluated = Vec::with_capacity(zs.len());
    let mut n_failed = 0;
    let start = centre.mode.clone();
    for z in &zs {
        let theta: Vec<f64> =
            (0..d).map(|i| theta_mode[i] + (0..d).map(|j| axes[j][i] * z[j]).sum::<f64>()).collect();
        match engine.laplace(&theta, Some(&start)) {
            Ok(p) if p.log_posterior().is_finite() => evaluated.push(GridPoint {
                theta,
                log_marginal: p.log_marginal,
                log_prior: p.log_prior_theta,
                weight: p.log_posterior(),
                mode: p.mode,
                converged: p.converged,
                iterations: p.iterations,
                grad_norm: p.grad_norm,
            }),
            _ => n_failed += 1,
        }
    }
    if evaluated.is_empty() {
        return Err(Error::Divergence(String::from("no grid point could be evaluated")));
    }
    let n_evaluated = zs.len();
    let top = evaluated.iter().fold(f64::NEG_INFINITY, |a, p| a.max(p.weight));
    let total: f64 = evaluated.iter().map(|p| (p.weight - top).exp()).sum();
    for p in evaluated.iter_mut() {
        p.weight = (p.weight - top).exp() / total;
    }
    evaluated.retain(|p| p.weight >= cfg.prune);
    let kept: f64 = evaluated.iter().map(|p| p.weight).sum();
    for p in evaluated.iter_mut() {
        p.weight /= kept;
    }
    Ok(PosteriorFit {
        points: evaluated,
        hyper_names,
        theta_mode,
        theta_axes: axes,
        n_evaluated,
        n_failed,
        newton: cfg.newton,
    })
}

/// Draws from the fitted mixture: a grid point by weight, then the latent
/// vector from that point's constrained Gaussian approximation. Draw `j`
/// uses its own RNG stream, so results do not depend on grouping.
pub fn sample_posterior(fit: &PosteriorFit, spec: &ModelSpec, n_draws: usize, seed: u64) -> Result<Draws> {
    if fit.points.is_empty() {
        return Err(Error::InvalidArgument(String::from("fit has no grid points")));
    }
    let engine = LaplaceEngine::new(spec, fit.newton)?;
    let weights: Vec<f64> = fit.points.iter().map(|p| p.weight).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(alloc::format!("invalid grid weights: {e}")))?;
    let mut rng = rng::rng_for(seed, &[labels::DRAWS]);
    let index: Vec<usize> = (0..n_draws).map(|_| dist.sample(&mut rng)).collect();
    let n = spec.n_latent();
    let mut latent = vec![Vec::new(); n_draws];
    for (g, point) in fit.points.iter().enumerate() {
        let members: Vec<usize> = (0..n_draws).filter(|&j| index[j] == g).collect();
        if members.is_empty() {
            continue;
        }
        let approx = engine.approximation_at(&point.theta, &point.mode)?;
        for j in members {
            let mut r = rng::rng_for(seed, &[labels::DRAWS, j as u64]);
            let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
            latent[j] = approx.sample_with(&z);
        }
    }
    Ok(Draws { latent, theta: index.iter().map(|&g| fit.points[g].theta.clone()).collect(), theta_index: index })
}
