//! Penalized-complexity priors.
//!
//! Three families are provided: the exponential prior on a standard deviation,
//! the prior on the BYM2 mixing parameter built from the eigenvalues of the
//! scaled ICAR generalized inverse, and the joint Matérn range/SD prior. Each
//! also exposes its log-density on the unconstrained scale used by inference
//! (log precision, logit mixing, log range and log SD).

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::gmrf::ScaledIcar;
use crate::math::{self, expit};

/// Exponential prior on a standard deviation with `P(sigma > U) = alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcSdPrior {
    pub u: f64,
    pub alpha: f64,
    pub lambda: f64,
}

pub fn pc_sd(u: f64, alpha: f64) -> Result<PcSdPrior> {
    if !(u > 0.0) || !u.is_finite() {
        bail!(InvalidArgument, "PC prior threshold must be positive, got {u}");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        bail!(InvalidArgument, "PC prior tail probability must lie in (0, 1), got {alpha}");
    }
    Ok(PcSdPrior { u, alpha, lambda: -alpha.ln() / u })
}

impl PcSdPrior {
    pub fn density(&self, sigma: f64) -> f64 {
        self.ln_density(sigma).exp()
    }

    pub fn ln_density(&self, sigma: f64) -> f64 {
        if sigma >= 0.0 && sigma.is_finite() {
            self.lambda.ln() - self.lambda * sigma
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn cdf(&self, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            0.0
        } else {
            -(-self.lambda * sigma).exp_m1()
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        -(-p).ln_1p() / self.lambda
    }

    /// Log-density of `theta = ln(tau)` where `sigma = tau^(-1/2)`.
    pub fn ln_density_log_precision(&self, theta: f64) -> f64 {
        let sigma = (-0.5 * theta).exp();
        self.lambda.ln() - self.lambda * sigma + (0.5 * sigma).ln()
    }

    /// Log-density of `theta = ln(sigma)`.
    pub fn ln_density_log_sd(&self, theta: f64) -> f64 {
        let sigma = theta.exp();
        self.lambda.ln() - self.lambda * sigma + theta
    }
}

/// `x - ln(1 + x)` divided by `x^2`, accurate near zero.
fn kld_kernel(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        // Series of (x - ln(1+x)) / x^2.
        0.5 - x / 3.0 + x * x / 4.0 - x * x * x / 5.0
    } else {
        (x - x.ln_1p()) / (x * x)
    }
}

/// Prior on the BYM2 mixing parameter `phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcPhiPrior {
    /// `gamma_i - 1` for the eigenvalues of the scaled generalized inverse.
    shifted: Vec<f64>,
    pub lambda: f64,
    /// Tabulated log-density on a grid uniform in `logit(phi)`.
    table_theta: Vec<f64>,
    table_ln_density: Vec<f64>,
}

/// Number of points in the tabulated density.
pub const PHI_TABLE_POINTS: usize = 2001;

impl PcPhiPrior {
    fn with_lambda(eigenvalues: &[f64], lambda: f64) -> Self {
        Self {
            shifted: eigenvalues.iter().map(|g| g - 1.0).collect(),
            lambda,
            table_theta: Vec::new(),
            table_ln_density: Vec::new(),
        }
    }

    /// `KLD(phi) / phi^2`, accurate for small `phi`.
    fn kld_over_phi2(&self, phi: f64) -> f64 {
        0.5 * self.shifted.iter().map(|a| a * a * kld_kernel(phi * a)).sum::<f64>()
    }

    /// `ln(1 + phi a)` written as `ln((1 - phi) + phi gamma)` with `phi = expit(theta)`.
    fn ln_mix(theta: f64, a: f64) -> f64 {
        let gamma = a + 1.0;
        if gamma == 0.0 {
            -math::log1pexp(theta)
        } else {
            (expit(-theta) + expit(theta) * gamma).ln()
        }
    }

    /// Kullback-Leibler divergence from the base model at `phi = expit(theta)`.
    pub fn kld_logit(&self, theta: f64) -> f64 {
        let phi = expit(theta);
        if phi < 0.5 {
            return phi * phi * self.kld_over_phi2(phi);
        }
        let sum_a: f64 = self.shifted.iter().sum();
        0.5 * (phi * sum_a - self.shifted.iter().map(|&a| Self::ln_mix(theta, a)).sum::<f64>())
    }

    /// Distance `d = sqrt(2 KLD)` at `phi = expit(theta)`.
    pub fn distance_logit(&self, theta: f64) -> f64 {
        let phi = expit(theta);
        if phi < 0.5 {
            phi * (2.0 * self.kld_over_phi2(phi)).sqrt()
        } else {
            (2.0 * self.kld_logit(theta)).sqrt()
        }
    }

    /// `dd/dtheta` at `phi = expit(theta)`.
    fn distance_logit_derivative(&self, theta: f64) -> f64 {
        let phi = expit(theta);
        let one_minus = expit(-theta);
        // dKLD/dphi * dphi/dtheta = 0.5 phi (1 - phi) sum a^2 phi / (1 + phi a).
        let s: f64 = self
            .shifted
            .iter()
            .map(|&a| a * a * one_minus / (one_minus + phi * (a + 1.0)))
            .sum();
        let half_phi2_s = 0.5 * phi * phi * s;
        if phi < 0.5 {
            // Divide by d = phi * sqrt(2 KLD / phi^2) without cancelling phi.
            0.5 * phi * s / (2.0 * self.kld_over_phi2(phi)).sqrt()
        } else {
            half_phi2_s / self.distance_logit(theta)
        }
    }

    /// Kullback-Leibler divergence from the base model `phi = 0`.
    pub fn kld(&self, phi: f64) -> f64 {
        if phi <= 0.0 {
            return 0.0;
        }
        if phi >= 1.0 {
            return f64::INFINITY;
        }
        self.kld_logit(math::logit(phi))
    }

    /// Distance `d(phi) = sqrt(2 KLD(phi))`.
    pub fn distance(&self, phi: f64) -> f64 {
        if phi <= 0.0 {
            return 0.0;
        }
        if phi >= 1.0 {
            return f64::INFINITY;
        }
        self.distance_logit(math::logit(phi))
    }

    /// `d'(phi)`.
    pub fn distance_derivative(&self, phi: f64) -> f64 {
        if phi <= 0.0 {
            return (0.5 * self.shifted.iter().map(|a| a * a).sum::<f64>()).sqrt();
        }
        let theta = math::logit(phi);
        self.distance_logit_derivative(theta) / (phi * (1.0 - phi))
    }

    pub fn ln_density(&self, phi: f64) -> f64 {
        if !(phi >= 0.0 && phi < 1.0) {
            return f64::NEG_INFINITY;
        }
        self.lambda.ln() - self.lambda * self.distance(phi) + self.distance_derivative(phi).ln()
    }

    pub fn density(&self, phi: f64) -> f64 {
        self.ln_density(phi).exp()
    }

    /// Exact CDF `1 - exp(-lambda d(phi))`.
    pub fn cdf(&self, phi: f64) -> f64 {
        if phi <= 0.0 {
            0.0
        } else if phi >= 1.0 {
            1.0
        } else {
            -(-self.lambda * self.distance(phi)).exp_m1()
        }
    }

    /// CDF by Gauss-Legendre quadrature of the density.
    pub fn cdf_quadrature(&self, phi: f64) -> f64 {
        math::integrate(|x| self.density(x), 0.0, phi, 64)
    }

    /// Quantile on the logit scale.
    pub fn quantile_logit(&self, p: f64) -> f64 {
        let target = -(-p).ln_1p() / self.lambda;
        math::bisect(|t| self.distance_logit(t) - target, -700.0, 1e5, 1e-12)
            .unwrap_or(if p < 0.5 { -700.0 } else { 1e5 })
    }

    pub fn quantile(&self, p: f64) -> f64 {
        expit(self.quantile_logit(p))
    }

    /// Log-density of `theta = logit(phi)`.
    pub fn ln_density_logit(&self, theta: f64) -> f64 {
        if !theta.is_finite() {
            return f64::NEG_INFINITY;
        }
        self.lambda.ln() - self.lambda * self.distance_logit(theta)
            + self.distance_logit_derivative(theta).ln()
    }

    /// Linear interpolation of the tabulated logit-scale log-density.
    pub fn ln_density_logit_tabulated(&self, theta: f64) -> f64 {
        let t = &self.table_theta;
        if theta < t[0] || theta > t[t.len() - 1] {
            return self.ln_density_logit(theta);
        }
        let step = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
        let k = (((theta - t[0]) / step) as usize).min(t.len() - 2);
        let w = (theta - t[k]) / step;
        (1.0 - w) * self.table_ln_density[k] + w * self.table_ln_density[k + 1]
    }

    /// Tabulation grid and log-density values.
    pub fn table(&self) -> (&[f64], &[f64]) {
        (&self.table_theta, &self.table_ln_density)
    }

    /// Trapezoidal mass of the tabulated density over the tabulated range.
    pub fn table_mass(&self) -> f64 {
        let t = &self.table_theta;
        let f = &self.table_ln_density;
        (1..t.len()).map(|k| 0.5 * (t[k] - t[k - 1]) * (f[k].exp() + f[k - 1].exp())).sum()
    }
}

/// Calibrates the mixing prior so that `P(phi < phi0) = mass`, solving for
/// `lambda` by bisection against the quadrature CDF.
pub fn pc_phi(icar: &ScaledIcar, phi0: f64, mass: f64) -> Result<PcPhiPrior> {
    pc_phi_from_eigenvalues(&icar.eigenvalues, phi0, mass)
}

pub fn pc_phi_from_eigenvalues(eigenvalues: &[f64], phi0: f64, mass: f64) -> Result<PcPhiPrior> {
    if eigenvalues.len() < 2 {
        bail!(InvalidArgument, "mixing prior needs at least two eigenvalues");
    }
    if !(phi0 > 0.0 && phi0 < 1.0) || !(mass > 0.0 && mass < 1.0) {
        bail!(InvalidArgument, "calibration target P(phi < {phi0}) = {mass} is invalid");
    }
    if eigenvalues.iter().all(|g| (g - 1.0).abs() < 1e-12) {
        bail!(Calibration, "eigenvalues give a zero distance for every phi");
    }
    let cdf_at = |lambda: f64| PcPhiPrior::with_lambda(eigenvalues, lambda).cdf_quadrature(phi0);
    let (mut lo, mut hi) = (1e-8, 1.0);
    while cdf_at(hi) < mass {
        hi *= 2.0;
        if hi > 1e8 {
            bail!(Calibration, "no rate reaches P(phi < {phi0}) = {mass}");
        }
    }
    let lambda = math::bisect(|l| cdf_at(l) - mass, lo, hi, 1e-14)
        .ok_or_else(|| crate::Error::Calibration(alloc::format!("bisection bracket lost")))?;
    lo = lambda;
    let mut prior = PcPhiPrior::with_lambda(eigenvalues, lo);

    // Tabulate over the central 1 - 2e-6 of the mass on the logit scale.
    let lo_t = prior.quantile_logit(1e-6);
    let hi_t = prior.quantile_logit(1.0 - 1e-6);
    let n = PHI_TABLE_POINTS;
    let theta: Vec<f64> = (0..n).map(|k| lo_t + (hi_t - lo_t) * k as f64 / (n - 1) as f64).collect();
    let vals: Vec<f64> = theta.iter().map(|&t| prior.ln_density_logit(t)).collect();
    prior.table_theta = theta;
    prior.table_ln_density = vals;
    Ok(prior)
}

/// Joint prior on the Matérn effective range and marginal SD (two dimensions).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcMaternPrior {
    pub rho0: f64,
    pub lambda_rho: f64,
    pub lambda_sigma: f64,
}

/// Range median at one fifth of the domain diameter and `P(sigma > 1) = 0.01`.
pub fn pc_matern(diameter: f64) -> Result<PcMaternPrior> {
    if !(diameter > 0.0) || !diameter.is_finite() {
        bail!(InvalidArgument, "domain diameter must be positive, got {diameter}");
    }
    let rho0 = diameter / 5.0;
    Ok(PcMaternPrior {
        rho0,
        lambda_rho: core::f64::consts::LN_2 * rho0,
        lambda_sigma: -(0.01f64).ln(),
    })
}

impl PcMaternPrior {
    pub fn ln_density(&self, rho: f64, sigma: f64) -> f64 {
        if !(rho > 0.0) || !(sigma >= 0.0) || !rho.is_finite() || !sigma.is_finite() {
            return f64::NEG_INFINITY;
        }
        self.lambda_rho.ln() - 2.0 * rho.ln() - self.lambda_rho / rho + self.lambda_sigma.ln()
            - self.lambda_sigma * sigma
    }

    /// Log-density of `(ln rho, ln sigma)`.
    pub fn ln_density_log(&self, log_rho: f64, log_sigma: f64) -> f64 {
        self.ln_density(log_rho.exp(), log_sigma.exp()) + log_rho + log_sigma
    }

    pub fn range_cdf(&self, rho: f64) -> f64 {
        if rho <= 0.0 {
            0.0
        } else {
            (-self.lambda_rho / rho).exp()
        }
    }

    pub fn range_quantile(&self, p: f64) -> f64 {
        -self.lambda_rho / p.ln()
    }

    pub fn sigma_cdf(&self, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            0.0
        } else {
            -(-self.lambda_sigma * sigma).exp_m1()
        }
    }
}

/// Prior on a block of hyperparameters expressed on the internal scale.
#[derive(Debug, Clone, PartialEq)]
pub enum HyperPrior {
    /// `theta = ln(tau)` with a PC prior on `tau^(-1/2)`.
    PcPrecision(PcSdPrior),
    /// `theta = ln(sigma)`.
    PcSd(PcSdPrior),
    /// `theta = logit(phi)`.
    PcPhi(Arc<PcPhiPrior>),
    /// `theta = (ln rho, ln sigma)`.
    PcMatern(PcMaternPrior),
    /// Improper flat prior on the internal scale, for debugging.
    Flat { dim: usize },
}

impl HyperPrior {
    pub fn dim(&self) -> usize {
        match self {
            HyperPrior::PcMatern(_) => 2,
            HyperPrior::Flat { dim } => *dim,
            _ => 1,
        }
    }

    pub fn ln_density(&self, theta: &[f64]) -> f64 {
        match self {
            HyperPrior::PcPrecision(p) => p.ln_density_log_precision(theta[0]),
            HyperPrior::PcSd(p) => p.ln_density_log_sd(theta[0]),
            HyperPrior::PcPhi(p) => p.ln_density_logit(theta[0]),
            HyperPrior::PcMatern(p) => p.ln_density_log(theta[0], theta[1]),
            HyperPrior::Flat { .. } => 0.0,
        }
    }

    /// Prior median mapped to the internal scale, used as a starting point.
    pub fn initial(&self) -> Vec<f64> {
        match self {
            HyperPrior::PcPrecision(p) => vec![-2.0 * p.quantile(0.5).ln()],
            HyperPrior::PcSd(p) => vec![p.quantile(0.5).ln()],
            HyperPrior::PcPhi(p) => vec![p.quantile_logit(0.5)],
            HyperPrior::PcMatern(p) => {
                vec![p.range_quantile(0.5).ln(), (-(0.5f64).ln() / p.lambda_sigma).ln()]
            }
            HyperPrior::Flat { dim } => vec![0.0; *dim],
        }
    }
}
