//! Constrained Gaussian approximation at the conditional mode.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{DMatrix, DVector};

use super::{BlockKind, Likelihood, ModelSpec};
use crate::error::{Error, Result};
use crate::gmrf::{matern_params, KrigingCorrection, LinearConstraints};
use crate::math::{expit, log1pexp, LN_2PI};
use crate::sparse::{CholeskyFactor, CscMatrix, SymbolicCholesky};

/// Newton iteration settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Convergence threshold on the constraint-projected gradient (max norm).
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { grad_tol: 1e-8, max_iter: 50, max_halvings: 30 }
    }
}

/// How each observation enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ObsRole {
    Soft,
    Hard,
    Ignored,
}

#[derive(Debug, Clone)]
enum BlockCache {
    None,
    Bym2 { scaled: CscMatrix, ln_pdet: f64 },
    Spde { symbolic: Arc<SymbolicCholesky> },
}

/// Everything about a [`ModelSpec`] that does not depend on the
/// hyperparameters: the Hessian sparsity pattern, its symbolic factorization
/// and the scatter maps used to assemble numeric values.
#[derive(Debug, Clone)]
pub struct LaplaceEngine<'a> {
    spec: &'a ModelSpec,
    cfg: NewtonConfig,
    pattern: CscMatrix,
    symbolic: Arc<SymbolicCholesky>,
    block_pos: Vec<Vec<usize>>,
    block_cache: Vec<BlockCache>,
    obs_terms: Vec<(usize, usize, f64)>,
    gram: Vec<(usize, f64)>,
    roles: Vec<ObsRole>,
    constraints: LinearConstraints,
    aat_chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    log_det_aat: f64,
    log_det_aat_prior: f64,
    ll_const: f64,
}

/// Gaussian approximation to `x | theta, y` at the constrained mode.
#[derive(Debug, Clone)]
pub struct LaplacePoint {
    pub theta: Vec<f64>,
    pub mode: Vec<f64>,
    /// Laplace approximation to `ln p(y | theta)`.
    pub log_marginal: f64,
    pub log_prior_theta: f64,
    pub log_lik: f64,
    pub log_prior_latent: f64,
    /// Log density of the Gaussian approximation at its mode.
    pub log_gaussian_at_mode: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    factor: CholeskyFactor,
    kriging: Option<KrigingCorrection>,
}

impl LaplacePoint {
    /// Unnormalized log posterior of `theta`.
    pub fn log_posterior(&self) -> f64 {
        self.log_marginal + self.log_prior_theta
    }

    /// Maps standard normals to a draw from the constrained approximation.
    pub fn sample_with(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.factor.sample_with(z);
        for (xi, mi) in x.iter_mut().zip(&self.mode) {
            *xi += mi;
        }
        if let Some(k) = &self.kriging {
            k.apply(&mut x);
        }
        x
    }

    /// Log density of the approximation at a point satisfying the constraints.
    pub fn ln_gaussian(&self, x: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(&self.mode).map(|(a, b)| a - b).collect();
        self.log_gaussian_at_mode - 0.5 * self.factor.quadratic_form(&d)
    }

    /// Factor of the constraint-augmented Hessian `H + AᵀA`.
    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }
}

fn block_pattern(kind: &BlockKind) -> Vec<(usize, usize)> {
    match kind {
        BlockKind::Fixed { labels, .. } => (0..labels.len()).map(|i| (i, i)).collect(),
        BlockKind::Iid { n, .. } => (0..*n).map(|i| (i, i)).collect(),
        BlockKind::Bym2 { icar, .. } => {
            let m = icar.m;
            let mut p = Vec::new();
            for i in 0..m {
                p.push((i, i));
                p.push((i, m + i));
                p.push((m + i, i));
            }
            for (r, c, _) in icar.structure.triplets() {
                p.push((m + r, m + c));
            }
            p
        }
        BlockKind::Spde { parts, .. } => parts.pattern.triplets().into_iter().map(|(r, c, _)| (r, c)).collect(),
    }
}

/// `(tau, phi, 1 - phi)` from `(ln tau, logit phi)`.
fn bym2_hyper(theta: &[f64]) -> (f64, f64, f64) {
    (theta[0].exp(), expit(theta[1]), expit(-theta[1]))
}

/// Stored precision values of a block in [`block_pattern`] order.
fn block_values(kind: &BlockKind, theta: &[f64]) -> Result<Vec<f64>> {
    Ok(match kind {
        BlockKind::Fixed { labels, prior_sd } => {
            let prec = if prior_sd.is_finite() { 1.0 / (prior_sd * prior_sd) } else { 0.0 };
            vec![prec; labels.len()]
        }
        BlockKind::Iid { n, .. } => vec![theta[0].exp(); *n],
        BlockKind::Bym2 { icar, .. } => {
            let (tau, phi, one_m) = bym2_hyper(theta);
            let a = tau / one_m;
            let c = -(phi * tau).sqrt() / one_m;
            let d = phi / one_m;
            let mut v = Vec::with_capacity(3 * icar.m + icar.structure.nnz());
            for _ in 0..icar.m {
                v.extend_from_slice(&[a, c, c]);
            }
            for (r, col, val) in icar.structure.triplets() {
                v.push(icar.scale * val + if r == col { d } else { 0.0 });
            }
            v
        }
        BlockKind::Spde { parts, .. } => {
            let (kappa, tau) = matern_params(theta[0].exp(), theta[1].exp())?;
            parts.values(kappa, tau)
        }
    })
}

fn spmv(pattern: &CscMatrix, vals: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; pattern.nrows()];
    let (cp, ri) = (pattern.col_ptr(), pattern.row_idx());
    for c in 0..pattern.ncols() {
        let xc = x[c];
        if xc == 0.0 {
            continue;
        }
        for p in cp[c]..cp[c + 1] {
            y[ri[p]] += vals[p] * xc;
        }
    }
    y
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

impl<'a> LaplaceEngine<'a> {
    pub fn new(spec: &'a ModelSpec, cfg: NewtonConfig) -> Result<Self> {
        let n = spec.n_latent();
        let roles: Vec<ObsRole> = match &spec.likelihood {
            Likelihood::Binomial { .. } => vec![ObsRole::Soft; spec.n_obs()],
            Likelihood::Gaussian { v, .. } => v
                .iter()
                .map(|&vi| {
                    if vi == 0.0 {
                        ObsRole::Hard
                    } else if vi.is_infinite() {
                        ObsRole::Ignored
                    } else {
                        ObsRole::Soft
                    }
                })
                .collect(),
        };
        let bt = spec.projector.transpose();
        let prior_constraints = spec.prior_constraints();
        let mut constraints = prior_constraints.clone();
        if let Likelihood::Gaussian { z, .. } = &spec.likelihood {
            for (obs, role) in roles.iter().enumerate() {
                if *role == ObsRole::Hard {
                    let mut row = vec![0.0; n];
                    for (i, v) in bt.column(obs) {
                        row[i] = v;
                    }
                    constraints.append(&LinearConstraints::new(vec![row], vec![z[obs]]));
                }
            }
        }

        let mut t: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 0.0)).collect();
        let patterns: Vec<Vec<(usize, usize)>> = spec.blocks.iter().map(|b| block_pattern(&b.kind)).collect();
        for (b, p) in spec.blocks.iter().zip(&patterns) {
            t.extend(p.iter().map(|&(r, c)| (b.offset + r, b.offset + c, 0.0)));
        }
        let obs_rows: Vec<Vec<(usize, f64)>> = (0..spec.n_obs()).map(|o| bt.column(o).collect()).collect();
        for (o, row) in obs_rows.iter().enumerate() {
            if roles[o] == ObsRole::Soft {
                for &(i, _) in row {
                    for &(j, _) in row {
                        t.push((i, j, 0.0));
                    }
                }
            }
        }
        let gram_t = constraints.gram_triplets();
        t.extend(gram_t.iter().map(|&(i, j, _)| (i, j, 0.0)));
        let pattern = CscMatrix::from_triplets(n, n, &t);
        let symbolic = Arc::new(SymbolicCholesky::new(&pattern)?);
        let pos = |r: usize, c: usize| pattern.position(r, c).expect("entry present in the pattern");

        let block_pos = spec
            .blocks
            .iter()
            .zip(&patterns)
            .map(|(b, p)| p.iter().map(|&(r, c)| pos(b.offset + r, b.offset + c)).collect())
            .collect();
        let mut obs_terms = Vec::new();
        for (o, row) in obs_rows.iter().enumerate() {
            if roles[o] == ObsRole::Soft {
                for &(i, a) in row {
                    for &(j, b) in row {
                        obs_terms.push((pos(i, j), o, a * b));
                    }
                }
            }
        }
        let gram = gram_t.iter().map(|&(i, j, v)| (pos(i, j), v)).collect();
        let block_cache = spec
            .blocks
            .iter()
            .map(|b| -> Result<BlockCache> {
                Ok(match &b.kind {
                    BlockKind::Bym2 { icar, .. } => BlockCache::Bym2 {
                        scaled: icar.scaled_structure(),
                        ln_pdet: -icar.eigenvalues.iter().filter(|&&g| g > 0.0).map(|g| g.ln()).sum::<f64>(),
                    },
                    BlockKind::Spde { parts, .. } => {
                        BlockCache::Spde { symbolic: Arc::new(SymbolicCholesky::new(&parts.pattern)?) }
                    }
                    _ => BlockCache::None,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let (aat_chol, log_det_aat) = if constraints.is_empty() {
            (None, 0.0)
        } else {
            let k = constraints.len();
            let aat = DMatrix::from_fn(k, k, |i, j| dot(&constraints.rows[i], &constraints.rows[j]));
            let chol = aat.cholesky().ok_or_else(|| {
                Error::Config(alloc::string::String::from("constraints are linearly dependent"))
            })?;
            let ld = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            (Some(chol), ld)
        };
        let log_det_aat_prior = if prior_constraints.is_empty() { 0.0 } else { prior_constraints.log_det_aat()? };

        let ll_const = match &spec.likelihood {
            Likelihood::Binomial { y, n } => y
                .iter()
                .zip(n)
                .map(|(&y, &n)| {
                    let (y, n) = (y as f64, n as f64);
                    libm::lgamma(n + 1.0) - libm::lgamma(y + 1.0) - libm::lgamma(n - y + 1.0)
                })
                .sum(),
            Likelihood::Gaussian { v, .. } => v
                .iter()
                .zip(&roles)
                .filter(|(_, r)| **r == ObsRole::Soft)
                .map(|(v, _)| -0.5 * (LN_2PI + v.ln()))
                .sum(),
        };

        Ok(Self {
            spec,
            cfg,
            pattern,
            symbolic,
            block_pos,
            block_cache,
            obs_terms,
            gram,
            roles,
            constraints,
            aat_chol,
            log_det_aat,
            log_det_aat_prior,
            ll_const,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    /// All hard constraints: block constraints followed by exact observations.
    pub fn constraints(&self) -> &LinearConstraints {
        &self.constraints
    }

    /// Prior precision values on the Hessian pattern.
    fn precision_values(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut q = vec![0.0; self.pattern.nnz()];
        for (b, pos) in self.spec.blocks.iter().zip(&self.block_pos) {
            let vals = block_values(&b.kind, &theta[b.theta_range()])?;
            for (&p, v) in pos.iter().zip(vals) {
                q[p] += v;
            }
        }
        Ok(q)
    }

    /// Log prior density of the latent vector on the constraint subspace.
    pub fn log_prior_latent(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (b, cache) in self.spec.blocks.iter().zip(&self.block_cache) {
            let xb = &x[b.range()];
            let th = &theta[b.theta_range()];
            acc += match (&b.kind, cache) {
                (BlockKind::Fixed { prior_sd, .. }, _) => {
                    if prior_sd.is_finite() {
                        xb.iter()
                            .map(|v| -0.5 * LN_2PI - prior_sd.ln() - 0.5 * (v / prior_sd) * (v / prior_sd))
                            .sum()
                    } else {
                        0.0
                    }
                }
                (BlockKind::Iid { .. }, _) => {
                    let tau = th[0].exp();
                    xb.iter().map(|v| 0.5 * (th[0] - LN_2PI) - 0.5 * tau * v * v).sum()
                }
                (BlockKind::Bym2 { icar, .. }, BlockCache::Bym2 { scaled, ln_pdet }) => {
                    let m = icar.m;
                    let (tau, phi, one_m) = bym2_hyper(th);
                    let (bv, u) = xb.split_at(m);
                    let quad = dot(u, &scaled.mul_vec(u));
                    let lu = -0.5 * (m as f64 - 1.0) * LN_2PI + 0.5 * ln_pdet - 0.5 * quad;
                    let var = one_m / tau;
                    let shift = (phi / tau).sqrt();
                    let lb: f64 = bv
                        .iter()
                        .zip(u)
                        .map(|(b, u)| {
                            let d = b - shift * u;
                            -0.5 * (LN_2PI + var.ln()) - 0.5 * d * d / var
                        })
                        .sum();
                    lu + lb
                }
                (BlockKind::Spde { parts, .. }, BlockCache::Spde { symbolic }) => {
                    let vals = block_values(&b.kind, th)?;
                    let f = CholeskyFactor::factorize(symbolic, &vals)?;
                    let quad = dot(xb, &spmv(&parts.pattern, &vals, xb));
                    -0.5 * xb.len() as f64 * LN_2PI + 0.5 * f.log_det() - 0.5 * quad
                }
                _ => unreachable!("block cache matches block kind"),
            };
        }
        Ok(acc)
    }

    /// Log-likelihood of the non-exact observations given linear predictors.
    pub fn log_lik(&self, eta: &[f64]) -> f64 {
        let core: f64 = match &self.spec.likelihood {
            Likelihood::Binomial { y, n } => (0..eta.len())
                .map(|k| y[k] as f64 * eta[k] - n[k] as f64 * log1pexp(eta[k]))
                .sum(),
            Likelihood::Gaussian { z, v } => (0..eta.len())
                .filter(|&k| self.roles[k] == ObsRole::Soft)
                .map(|k| -0.5 * (z[k] - eta[k]) * (z[k] - eta[k]) / v[k])
                .sum(),
        };
        core + self.ll_const
    }

    /// `ln pi(theta) + ln pi(x | theta) + ln p(y | x)` for feasible `x`.
    pub fn log_joint(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let eta = self.spec.linear_predictor(x);
        Ok(self.spec.ln_hyper_prior(theta) + self.log_prior_latent(theta, x)? + self.log_lik(&eta))
    }

    /// Gradient of the log-likelihood in `eta` and the negative Hessian weights.
    fn derivatives(&self, eta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g = vec![0.0; eta.len()];
        let mut w = vec![0.0; eta.len()];
        match &self.spec.likelihood {
            Likelihood::Binomial { y, n } => {
                for k in 0..eta.len() {
                    let p = expit(eta[k]);
                    g[k] = y[k] as f64 - n[k] as f64 * p;
                    w[k] = n[k] as f64 * p * (1.0 - p);
                }
            }
            Likelihood::Gaussian { z, v } => {
                for k in 0..eta.len() {
                    if self.roles[k] == ObsRole::Soft {
                        g[k] = (z[k] - eta[k]) / v[k];
                        w[k] = 1.0 / v[k];
                    }
                }
            }
        }
        (g, w)
    }

    fn objective(&self, q: &[f64], x: &[f64]) -> f64 {
        let eta = self.spec.linear_predictor(x);
        -0.5 * dot(x, &spmv(&self.pattern, q, x)) + self.log_lik(&eta)
    }

    fn project(&self, g: &mut [f64]) {
        if let Some(chol) = &self.aat_chol {
            let ag = DVector::from_iterator(self.constraints.len(), self.constraints.rows.iter().map(|r| dot(r, g)));
            let t = chol.solve(&ag);
            for (row, tk) in self.constraints.rows.iter().zip(t.iter()) {
                for (gi, ai) in g.iter_mut().zip(row) {
                    *gi -= ai * tk;
                }
            }
        }
    }

    fn factor_at(&self, q: &[f64], w: &[f64]) -> Result<(CholeskyFactor, Option<KrigingCorrection>)> {
        let mut h = q.to_vec();
        for &(p, o, c) in &self.obs_terms {
            h[p] += w[o] * c;
        }
        for &(p, v) in &self.gram {
            h[p] += v;
        }
        let factor = CholeskyFactor::factorize(&self.symbolic, &h)?;
        let kriging = if self.constraints.is_empty() {
            None
        } else {
            Some(KrigingCorrection::new(&factor, &self.constraints)?)
        };
        Ok((factor, kriging))
    }

    /// Newton iterations for the constrained conditional mode, followed by
    /// the Laplace approximation to the marginal likelihood.
    pub fn laplace(&self, theta: &[f64], warm: Option<&[f64]>) -> Result<LaplacePoint> {
        let n = self.spec.n_latent();
        if theta.len() != self.spec.n_hyper() {
            return Err(Error::Dimension(alloc::format!(
                "{} hyperparameters given, model has {}",
                theta.len(),
                self.spec.n_hyper()
            )));
        }
        let q = self.precision_values(theta)?;
        let mut x = match warm {
            Some(w) if w.len() == n => w.to_vec(),
            _ => vec![0.0; n],
        };
        let mut iterations = 0;
        let mut projected = false;
        loop {
            let eta = self.spec.linear_predictor(&x);
            let (dll, w) = self.derivatives(&eta);
            let (factor, kriging) = self.factor_at(&q, &w)?;
            let r = self.constraints.residual(&x);
            let scale = 1.0 + self.constraints.rhs.iter().fold(0.0f64, |a, e| a.max(e.abs()));
            if !projected && r.iter().any(|v| v.abs() > 1e-10 * scale) {
                if let Some(k) = &kriging {
                    k.apply(&mut x);
                }
                projected = true;
                continue;
            }
            let qx = spmv(&self.pattern, &q, &x);
            let btg = self.spec.projector.tr_mul_vec(&dll);
            let g: Vec<f64> = btg.iter().zip(&qx).map(|(a, b)| a - b).collect();
            let mut gp = g.clone();
            self.project(&mut gp);
            let grad_norm = gp.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if !grad_norm.is_finite() {
                return Err(Error::Divergence(alloc::format!("non-finite gradient at theta = {theta:?}")));
            }
            if grad_norm < self.cfg.grad_tol {
                return self.finish(theta, x, &eta, factor, kriging, true, iterations, grad_norm);
            }
            if iterations >= self.cfg.max_iter {
                return self.finish(theta, x, &eta, factor, kriging, false, iterations, grad_norm);
            }
            let mut rhs = g;
            for (row, rk) in self.constraints.rows.iter().zip(&r) {
                for (ri, ai) in rhs.iter_mut().zip(row) {
                    *ri -= ai * rk;
                }
            }
            let du = factor.solve(&rhs);
            let mut y: Vec<f64> = x.iter().zip(&du).map(|(a, b)| a + b).collect();
            if let Some(k) = &kriging {
                k.apply(&mut y);
            }
            let step: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            let f0 = self.objective(&q, &x);
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=self.cfg.max_halvings {
                let xt: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + t * s).collect();
                let ft = self.objective(&q, &xt);
                if ft.is_finite() && ft >= f0 - 1e-12 * (1.0 + f0.abs()) {
                    accepted = Some(xt);
                    break;
                }
                t *= 0.5;
            }
            iterations += 1;
            match accepted {
                Some(xt) => x = xt,
                None => return self.finish(theta, x, &eta, factor, kriging, false, iterations, grad_norm),
            }
        }
    }

    /// Gaussian approximation centred at a given feasible point without
    /// further Newton steps.
    pub fn approximation_at(&self, theta: &[f64], x: &[f64]) -> Result<LaplacePoint> {
        let q = self.precision_values(theta)?;
        let eta = self.spec.linear_predictor(x);
        let (dll, w) = self.derivatives(&eta);
        let (factor, kriging) = self.factor_at(&q, &w)?;
        let qx = spmv(&self.pattern, &q, x);
        let mut g: Vec<f64> =
            self.spec.projector.tr_mul_vec(&dll).iter().zip(&qx).map(|(a, b)| a - b).collect();
        self.project(&mut g);
        let grad_norm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        self.finish(theta, x.to_vec(), &eta, factor, kriging, grad_norm < self.cfg.grad_tol, 0, grad_norm)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        theta: &[f64],
        mode: Vec<f64>,
        eta: &[f64],
        factor: CholeskyFactor,
        kriging: Option<KrigingCorrection>,
        converged: bool,
        iterations: usize,
        grad_norm: f64,
    ) -> Result<LaplacePoint> {
        let n = mode.len() as f64;
        let k = self.constraints.len() as f64;
        let log_det_s = kriging.as_ref().map_or(0.0, |k| k.log_det_s());
        let log_gaussian_at_mode =
            -0.5 * (n - k) * LN_2PI + 0.5 * (factor.log_det() + log_det_s - self.log_det_aat);
        let log_prior_latent = self.log_prior_latent(theta, &mode)?;
        let log_lik = self.log_lik(eta);
        // Exact observations change the reference measure; the coarea factor
        // restores the density of the pinned linear predictors.
        let coarea = 0.5 * (self.log_det_aat - self.log_det_aat_prior);
        let log_marginal = log_prior_latent + log_lik - log_gaussian_at_mode - coarea;
        Ok(LaplacePoint {
            theta: theta.to_vec(),
            mode,
            log_marginal,
            log_prior_theta: self.spec.ln_hyper_prior(theta),
            log_lik,
            log_prior_latent,
            log_gaussian_at_mode,
            converged,
            iterations,
            grad_norm,
            factor,
            kriging,
        })
    }
}
