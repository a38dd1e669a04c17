//! Latent Gaussian model fitting.
//!
//! A [`ModelSpec`] describes a latent vector made of blocks (fixed effects,
//! iid effects, BYM2 and SPDE fields), a sparse projector from the latent
//! vector to the linear predictor of each observation, and a binomial-logit or
//! known-variance Gaussian observation model. [`fit_lgm`] integrates over the
//! hyperparameters on a grid with a constrained Laplace approximation at each
//! point, [`sample_posterior`] draws from the resulting mixture and
//! [`mcmc_oracle`] provides an exact Metropolis-Hastings reference.

mod grid;
mod laplace;
mod mcmc;

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::gmrf::{LinearConstraints, ScaledIcar, SpdeParts};
use crate::priors::HyperPrior;
use crate::sparse::CscMatrix;

pub use grid::{fit_lgm, sample_posterior, GridConfig, GridPoint, PosteriorFit};
pub use laplace::{LaplaceEngine, LaplacePoint, NewtonConfig};
pub use mcmc::{mcmc_oracle, split_rhat, McmcConfig, McmcResult};

/// Observation model.
#[derive(Debug, Clone, PartialEq)]
pub enum Likelihood {
    /// `y ~ Bin(n, expit(eta))`.
    Binomial { y: Vec<u32>, n: Vec<u32> },
    /// `z ~ N(eta, v)` with known `v`; `v = 0` pins `eta` exactly and
    /// `v = inf` drops the observation.
    Gaussian { z: Vec<f64>, v: Vec<f64> },
}

impl Likelihood {
    pub fn len(&self) -> usize {
        match self {
            Likelihood::Binomial { y, .. } => y.len(),
            Likelihood::Gaussian { z, .. } => z.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Kind and hyperparameter priors of a latent block.
///
/// Internal hyperparameter scales: iid `ln tau`; BYM2 `(ln tau, logit phi)`;
/// SPDE `(ln range, ln sd)`.
#[derive(Debug, Clone)]
pub enum BlockKind {
    /// Independent `N(0, prior_sd^2)` coefficients; an infinite SD gives a flat prior.
    Fixed { labels: Vec<String>, prior_sd: f64 },
    /// `n` iid `N(0, 1/tau)` effects.
    Iid { n: usize, precision_prior: HyperPrior },
    /// BYM2 field stored as `(b, u)`: the combined county effect
    /// `b = (sqrt(phi) u + sqrt(1 - phi) v)/sqrt(tau)` and the scaled ICAR
    /// component `u`, constrained to sum to zero.
    Bym2 { icar: Arc<ScaledIcar>, precision_prior: HyperPrior, phi_prior: HyperPrior },
    /// SPDE Matérn field on mesh nodes.
    Spde { parts: Arc<SpdeParts>, prior: HyperPrior },
}

impl BlockKind {
    pub fn len(&self) -> usize {
        match self {
            BlockKind::Fixed { labels, .. } => labels.len(),
            BlockKind::Iid { n, .. } => *n,
            BlockKind::Bym2 { icar, .. } => 2 * icar.m,
            BlockKind::Spde { parts, .. } => parts.pattern.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_hyper(&self) -> usize {
        match self {
            BlockKind::Fixed { .. } => 0,
            BlockKind::Iid { .. } => 1,
            BlockKind::Bym2 { .. } | BlockKind::Spde { .. } => 2,
        }
    }

    fn hyper_priors(&self) -> Vec<&HyperPrior> {
        match self {
            BlockKind::Fixed { .. } => Vec::new(),
            BlockKind::Iid { precision_prior, .. } => vec![precision_prior],
            BlockKind::Bym2 { precision_prior, phi_prior, .. } => vec![precision_prior, phi_prior],
            BlockKind::Spde { prior, .. } => vec![prior],
        }
    }
}

/// A block placed in the latent vector.
#[derive(Debug, Clone)]
pub struct LatentBlock {
    pub name: String,
    pub kind: BlockKind,
    pub offset: usize,
    pub len: usize,
    pub theta_offset: usize,
}

impl LatentBlock {
    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn theta_range(&self) -> core::ops::Range<usize> {
        self.theta_offset..self.theta_offset + self.kind.n_hyper()
    }

    pub fn hyper_names(&self) -> Vec<String> {
        let n = &self.name;
        match &self.kind {
            BlockKind::Fixed { .. } => Vec::new(),
            BlockKind::Iid { .. } => vec![alloc::format!("log_tau_{n}")],
            BlockKind::Bym2 { .. } => vec![alloc::format!("log_tau_{n}"), alloc::format!("logit_phi_{n}")],
            BlockKind::Spde { .. } => vec![alloc::format!("log_range_{n}"), alloc::format!("log_sd_{n}")],
        }
    }
}

/// A complete latent Gaussian model.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub likelihood: Likelihood,
    pub blocks: Vec<LatentBlock>,
    /// `n_obs x n_latent` map from the latent vector to linear predictors.
    pub projector: CscMatrix,
    n_latent: usize,
    n_hyper: usize,
}

impl ModelSpec {
    /// Places the blocks in order and validates dimensions.
    pub fn new(likelihood: Likelihood, blocks: Vec<(String, BlockKind)>, projector: CscMatrix) -> Result<Self> {
        let mut placed = Vec::with_capacity(blocks.len());
        let (mut offset, mut theta_offset) = (0, 0);
        for (name, kind) in blocks {
            if placed.iter().any(|b: &LatentBlock| b.name == name) {
                bail!(Config, "duplicate latent block '{name}'");
            }
            let len = kind.len();
            let n_hyper = kind.n_hyper();
            let prior_dim: usize = kind.hyper_priors().iter().map(|p| p.dim()).sum();
            if prior_dim != n_hyper {
                bail!(Config, "block '{name}' has {n_hyper} hyperparameters but priors of total dimension {prior_dim}");
            }
            if let BlockKind::Fixed { prior_sd, .. } = &kind {
                if !(*prior_sd > 0.0) {
                    bail!(Config, "fixed-effect prior SD must be positive, got {prior_sd}");
                }
            }
            placed.push(LatentBlock { name, kind, offset, len, theta_offset });
            offset += len;
            theta_offset += n_hyper;
        }
        let n_obs = likelihood.len();
        if projector.nrows() != n_obs || projector.ncols() != offset {
            bail!(
                Dimension,
                "projector is {}x{}, expected {n_obs}x{offset}",
                projector.nrows(),
                projector.ncols()
            );
        }
        match &likelihood {
            Likelihood::Binomial { y, n } => {
                if y.len() != n.len() {
                    bail!(Dimension, "{} responses but {} denominators", y.len(), n.len());
                }
                if let Some(k) = (0..y.len()).find(|&k| y[k] > n[k]) {
                    bail!(InvalidArgument, "observation {k} has y = {} > n = {}", y[k], n[k]);
                }
            }
            Likelihood::Gaussian { z, v } => {
                if z.len() != v.len() {
                    bail!(Dimension, "{} estimates but {} variances", z.len(), v.len());
                }
                if let Some(k) = (0..z.len()).find(|&k| !z[k].is_finite() || !(v[k] >= 0.0)) {
                    bail!(InvalidArgument, "observation {k} has estimate {} and variance {}", z[k], v[k]);
                }
            }
        }
        let spec = Self { likelihood, blocks: placed, projector, n_latent: offset, n_hyper: theta_offset };
        spec.check_fixed_rank()?;
        Ok(spec)
    }

    fn check_fixed_rank(&self) -> Result<()> {
        let cols: Vec<usize> = self
            .blocks
            .iter()
            .filter(|b| matches!(b.kind, BlockKind::Fixed { .. }))
            .flat_map(|b| b.range())
            .collect();
        if cols.is_empty() {
            return Ok(());
        }
        let t = self.projector.transpose();
        let k = cols.len();
        let mut gram = nalgebra::DMatrix::<f64>::zeros(k, k);
        for obs in 0..self.projector.nrows() {
            let row: Vec<f64> = cols.iter().map(|&c| t.get(c, obs)).collect();
            for i in 0..k {
                for j in 0..k {
                    gram[(i, j)] += row[i] * row[j];
                }
            }
        }
        if gram.cholesky().is_none() {
            bail!(Config, "fixed-effect design columns are not of full column rank");
        }
        Ok(())
    }

    pub fn n_latent(&self) -> usize {
        self.n_latent
    }

    pub fn n_obs(&self) -> usize {
        self.projector.nrows()
    }

    pub fn n_hyper(&self) -> usize {
        self.n_hyper
    }

    pub fn block(&self, name: &str) -> Option<&LatentBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn hyper_names(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.hyper_names()).collect()
    }

    /// Index of a fixed effect by label.
    pub fn fixed_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().find_map(|b| match &b.kind {
            BlockKind::Fixed { labels, .. } => labels.iter().position(|l| l == label).map(|i| b.offset + i),
            _ => None,
        })
    }

    /// Sum-to-zero constraints implied by the blocks.
    pub fn prior_constraints(&self) -> LinearConstraints {
        let mut c = LinearConstraints::new(Vec::new(), Vec::new());
        for b in &self.blocks {
            if let BlockKind::Bym2 { icar, .. } = &b.kind {
                c.append(&LinearConstraints::sum_to_zero(self.n_latent, b.offset + icar.m..b.offset + b.len));
            }
        }
        c
    }

    pub fn ln_hyper_prior(&self, theta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for b in &self.blocks {
            let mut at = b.theta_offset;
            for p in b.kind.hyper_priors() {
                acc += p.ln_density(&theta[at..at + p.dim()]);
                at += p.dim();
            }
        }
        acc
    }

    /// Prior medians on the internal scale.
    pub fn initial_theta(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.kind.hyper_priors().into_iter().flat_map(|p| p.initial())).collect()
    }

    pub fn linear_predictor(&self, x: &[f64]) -> Vec<f64> {
        self.projector.mul_vec(x)
    }
}

/// Posterior draws of the latent vector with the hyperparameters used.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    pub latent: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    /// Grid point (Laplace) or chain (MCMC) behind each draw.
    pub theta_index: Vec<usize>,
}

impl Draws {
    pub fn n_draws(&self) -> usize {
        self.latent.len()
    }

    /// Values of one latent coordinate across draws.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.latent.iter().map(|x| x[i]).collect()
    }

    /// Values of one hyperparameter across draws.
    pub fn hyper(&self, i: usize) -> Vec<f64> {
        self.theta.iter().map(|t| t[i]).collect()
    }

    /// Per-draw linear predictors at the observation sites.
    pub fn linear_predictors(&self, spec: &ModelSpec) -> Vec<Vec<f64>> {
        self.latent.iter().map(|x| spec.linear_predictor(x)).collect()
    }
}
