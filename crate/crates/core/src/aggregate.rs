//! County-level predictive draws from fitted models.
//!
//! Cluster and EA predictions are averaged within strata and mixed by urban
//! share (BYM2), or a projected probability surface is integrated against a
//! population density adjusted to the stratum totals (SPDE).

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::design::{CountyEstimate, CountyEstimates};
use crate::error::{bail, Result};
use crate::geodata::{DensityGrid, UrbanMask};
use crate::gmrf::Mesh;
use crate::inference::{BlockKind, Draws, ModelSpec};
use crate::math::{expit, logit, mean, quantile_sorted, sample_variance, sorted_copy};
use crate::models::{CLUSTER, COUNTY, FIELD, INTERCEPT, URBAN};
use crate::popgen::{PopulationFrame, RURAL, URBAN as URBAN_STRATUM};
use crate::rng::{self, labels};

/// Per-county stratum sizes and urban child share.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumMeta {
    /// EA counts `[C_iU, C_iR]`.
    pub eas: Vec<[usize; 2]>,
    /// Expected children per EA `[E_U, E_R]`.
    pub expected: Vec<[f64; 2]>,
    /// Urban share of children `q_U`.
    pub urban_fraction: Vec<f64>,
}

impl StratumMeta {
    /// True values from the frame: `E` is the realized mean number of
    /// children per EA, so `q_U = C_U E_U / (C_U E_U + C_R E_R)` holds.
    pub fn from_frame(frame: &PopulationFrame) -> Self {
        let counts = frame.stratum_counts();
        let children = frame.stratum_children();
        let expected = counts
            .iter()
            .enumerate()
            .map(|(c, n)| {
                let e = |s: usize| if n[s] == 0 { 0.0 } else { children[2 * c + s] as f64 / n[s] as f64 };
                [e(URBAN_STRATUM), e(RURAL)]
            })
            .collect();
        Self { eas: counts, expected, urban_fraction: frame.urban_child_fraction.clone() }
    }

    /// Fractions implied by EA counts and nominal children per EA, as a
    /// planner without a census of children would compute them.
    pub fn from_counts(eas: Vec<[usize; 2]>, expected_urban: f64, expected_rural: f64) -> Result<Self> {
        let expected = vec![[expected_urban, expected_rural]; eas.len()];
        let urban_fraction = eas
            .iter()
            .map(|n| {
                let u = n[0] as f64 * expected_urban;
                let t = u + n[1] as f64 * expected_rural;
                if t > 0.0 {
                    u / t
                } else {
                    0.0
                }
            })
            .collect();
        let meta = Self { eas, expected, urban_fraction };
        meta.validate()?;
        Ok(meta)
    }

    pub fn n_counties(&self) -> usize {
        self.eas.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.eas.len();
        if self.expected.len() != m || self.urban_fraction.len() != m {
            bail!(Dimension, "stratum metadata columns have unequal lengths");
        }
        for c in 0..m {
            if !(0.0..=1.0).contains(&self.urban_fraction[c]) {
                bail!(Domain, "urban fraction {} of county {c} is outside [0, 1]", self.urban_fraction[c]);
            }
            if self.expected[c].iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
                bail!(Domain, "expected children per EA of county {c} must be finite and nonnegative");
            }
        }
        Ok(())
    }

    /// Target population `C_is E_is` of each stratum.
    pub fn target(&self, county: usize) -> [f64; 2] {
        [
            self.eas[county][0] as f64 * self.expected[county][0],
            self.eas[county][1] as f64 * self.expected[county][1],
        ]
    }

    pub fn rural_fraction(&self) -> Vec<f64> {
        self.urban_fraction.iter().map(|q| 1.0 - q).collect()
    }
}

/// Per-draw mean over the `n_s` EA-level values of a stratum.
pub fn ea_average(draws: &[Vec<f64>], n_s: usize) -> Result<Vec<f64>> {
    if n_s == 0 {
        bail!(InvalidArgument, "a stratum needs at least one EA");
    }
    draws
        .iter()
        .enumerate()
        .map(|(j, d)| {
            if d.len() != n_s {
                bail!(Dimension, "draw {j} has {} EA values, expected {n_s}", d.len());
            }
            Ok(mean(d))
        })
        .collect()
}

/// `q_U p_U + (1 - q_U) p_R` per draw.
pub fn mix_urban_rural(p_urban: &[f64], p_rural: &[f64], q_urban: f64) -> Result<Vec<f64>> {
    if p_urban.len() != p_rural.len() {
        bail!(Dimension, "{} urban draws against {} rural draws", p_urban.len(), p_rural.len());
    }
    if !(0.0..=1.0).contains(&q_urban) {
        bail!(Domain, "urban fraction {q_urban} is outside [0, 1]");
    }
    Ok(p_urban.iter().zip(p_rural).map(|(u, r)| q_urban * u + (1.0 - q_urban) * r).collect())
}

/// Fixed and random effects of a BYM2 fit, one entry per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Bym2Effects {
    pub beta0: Vec<f64>,
    pub beta_urban: Option<Vec<f64>>,
    /// `b[j][i]` is the total county effect of county `i` in draw `j`.
    pub county: Vec<Vec<f64>>,
    /// Cluster nugget SD per draw.
    pub cluster_sd: Option<Vec<f64>>,
}

impl Bym2Effects {
    pub fn from_draws(spec: &ModelSpec, draws: &Draws) -> Result<Self> {
        let i0 = match spec.fixed_index(INTERCEPT) {
            Some(i) => i,
            None => bail!(InvalidArgument, "model has no intercept"),
        };
        let county = match spec.block(COUNTY) {
            Some(b) if matches!(b.kind, BlockKind::Bym2 { .. }) => b,
            _ => bail!(InvalidArgument, "model has no BYM2 county block"),
        };
        let m = county.len / 2;
        let cluster_sd = spec.block(CLUSTER).map(|b| {
            let t = b.theta_offset;
            draws.theta.iter().map(|th| (-0.5 * th[t]).exp()).collect()
        });
        Ok(Self {
            beta0: draws.coordinate(i0),
            beta_urban: spec.fixed_index(URBAN).map(|i| draws.coordinate(i)),
            county: draws.latent.iter().map(|x| x[county.offset..county.offset + m].to_vec()).collect(),
            cluster_sd,
        })
    }

    pub fn n_draws(&self) -> usize {
        self.beta0.len()
    }

    pub fn n_counties(&self) -> usize {
        self.county.first().map_or(0, |b| b.len())
    }
}

/// County draws stored as `draws[county][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountyDraws {
    pub draws: Vec<Vec<f64>>,
}

impl CountyDraws {
    pub fn n_counties(&self) -> usize {
        self.draws.len()
    }

    /// Posterior mean, variance and equal-tailed 80% interval per county.
    pub fn summarize(&self) -> CountyEstimates {
        let counties = self
            .draws
            .iter()
            .map(|d| {
                let s = sorted_copy(d);
                let est = mean(d);
                let lg: Vec<f64> = d.iter().map(|&p| logit(p)).collect();
                let finite = lg.iter().all(|v| v.is_finite());
                CountyEstimate {
                    estimate: est,
                    var: sample_variance(d),
                    logit_est: if finite { mean(&lg) } else { f64::NAN },
                    logit_var: if finite { sample_variance(&lg) } else { f64::NAN },
                    lower80: quantile_sorted(&s, 0.1),
                    upper80: quantile_sorted(&s, 0.9),
                    flags: 0,
                }
            })
            .collect();
        CountyEstimates { counties }
    }
}

/// `expit` averaged over `n` fresh nugget draws, or the plain value when
/// there is no nugget.
fn ea_mean_prob<R: Rng>(eta: f64, sd: Option<f64>, n: usize, rng: &mut R) -> f64 {
    match sd {
        Some(s) if s > 0.0 => {
            let n = n.max(1);
            (0..n).map(|_| expit(eta + s * rng.sample::<f64, _>(StandardNormal))).sum::<f64>() / n as f64
        }
        _ => expit(eta),
    }
}

/// `p_i = q_i expit(b0 + b_i) + (1 - q_i) expit(b0 + b_URB + b_i)` per draw
/// with rural fraction `q_i`. With a cluster nugget each stratum term is the
/// average over its `C_is` EAs of fresh nugget draws.
pub fn bym2_county_mixture(
    effects: &Bym2Effects,
    rural_fraction: &[f64],
    ea_counts: &[[usize; 2]],
    seed: u64,
) -> Result<CountyDraws> {
    let m = effects.n_counties();
    if rural_fraction.len() != m || ea_counts.len() != m {
        bail!(Dimension, "aggregation inputs cover {} counties, model has {m}", rural_fraction.len());
    }
    if let Some(q) = rural_fraction.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        bail!(Domain, "rural fraction {q} is outside [0, 1]");
    }
    let mut rng = rng::rng_for(seed, &[labels::AGGREGATE, 1]);
    let mut out = vec![Vec::with_capacity(effects.n_draws()); m];
    for j in 0..effects.n_draws() {
        let b0 = effects.beta0[j];
        let bu = effects.beta_urban.as_ref().map_or(0.0, |v| v[j]);
        let sd = effects.cluster_sd.as_ref().map(|v| v[j]);
        for i in 0..m {
            let b = effects.county[j][i];
            let q = rural_fraction[i];
            let rural = if q > 0.0 { ea_mean_prob(b0 + b, sd, ea_counts[i][1], &mut rng) } else { 0.0 };
            let urban = if q < 1.0 { ea_mean_prob(b0 + bu + b, sd, ea_counts[i][0], &mut rng) } else { 0.0 };
            out[i].push(q * rural + (1.0 - q) * urban);
        }
    }
    Ok(CountyDraws { draws: out })
}

/// County probabilities `expit(b0 + b_i)` of a smoothed direct fit.
pub fn smoothed_direct_draws(spec: &ModelSpec, draws: &Draws) -> Result<CountyDraws> {
    let effects = Bym2Effects::from_draws(spec, draws)?;
    let m = effects.n_counties();
    Ok(CountyDraws {
        draws: (0..m)
            .map(|i| (0..effects.n_draws()).map(|j| expit(effects.beta0[j] + effects.county[j][i])).collect())
            .collect(),
    })
}

/// Rescales the density within each county stratum so that it integrates
/// (sums over cells) to the stratum target `C_is E_is`.
pub fn adjust_density(grid: &DensityGrid, mask: &UrbanMask, meta: &StratumMeta) -> Result<Vec<f64>> {
    let m = grid.n_counties();
    if meta.n_counties() != m {
        bail!(Dimension, "metadata covers {} counties, grid has {m}", meta.n_counties());
    }
    if mask.urban.len() != grid.n_cells() {
        bail!(Dimension, "urban mask has {} cells, grid has {}", mask.urban.len(), grid.n_cells());
    }
    let mut mass = vec![[0.0f64; 2]; m];
    for k in 0..grid.n_cells() {
        mass[grid.county_id[k]][if mask.urban[k] { 0 } else { 1 }] += grid.values[k];
    }
    let mut factor = vec![[0.0f64; 2]; m];
    for c in 0..m {
        let target = meta.target(c);
        for s in 0..2 {
            if target[s] > 0.0 {
                if !(mass[c][s] > 0.0) {
                    bail!(
                        Domain,
                        "{} stratum of county {c} has no density mass for a target of {}",
                        if s == 0 { "urban" } else { "rural" },
                        target[s]
                    );
                }
                factor[c][s] = target[s] / mass[c][s];
            }
        }
    }
    Ok((0..grid.n_cells())
        .map(|k| grid.values[k] * factor[grid.county_id[k]][if mask.urban[k] { 0 } else { 1 }])
        .collect())
}

/// `p_i = sum_j p(x_j) w(x_j) / sum_j w(x_j)` over the cells of county `i`,
/// for every draw of the cell surface `cell_draws[j][cell]`.
pub fn integrate_surface(cell_draws: &[Vec<f64>], weights: &[f64], county_of: &[usize], m: usize) -> Result<CountyDraws> {
    let n = weights.len();
    if county_of.len() != n {
        bail!(Dimension, "{} cell weights for {} county labels", n, county_of.len());
    }
    let mut total = vec![0.0; m];
    for (k, &w) in weights.iter().enumerate() {
        if county_of[k] >= m {
            bail!(Dimension, "cell {k} belongs to county {} of {m}", county_of[k]);
        }
        total[county_of[k]] += w;
    }
    if let Some(c) = total.iter().position(|t| !(*t > 0.0)) {
        bail!(Domain, "county {c} has zero total population weight");
    }
    let mut out = vec![Vec::with_capacity(cell_draws.len()); m];
    let mut acc = vec![0.0; m];
    for (j, p) in cell_draws.iter().enumerate() {
        if p.len() != n {
            bail!(Dimension, "draw {j} has {} cells, expected {n}", p.len());
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for k in 0..n {
            acc[county_of[k]] += p[k] * weights[k];
        }
        for c in 0..m {
            out[c].push(acc[c] / total[c]);
        }
    }
    Ok(CountyDraws { draws: out })
}

/// Treatment of the cluster nugget when building the SPDE cell surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NuggetHandling {
    /// One nugget draw per cell and posterior draw.
    #[default]
    PerCell,
    /// Average over the expected number of EAs in each cell, given the
    /// stratum EA count spread in proportion to adjusted density.
    EaCount,
}

/// Cell-level probability draws `cell[j][k]` of an SPDE fit: intercept, the
/// urban effect on urban cells, the field interpolated at cell centres and
/// the nugget per `handling`.
pub fn spde_cell_draws(
    spec: &ModelSpec,
    draws: &Draws,
    mesh: &Mesh,
    grid: &DensityGrid,
    mask: &UrbanMask,
    handling: NuggetHandling,
    adjusted: &[f64],
    meta: &StratumMeta,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let i0 = match spec.fixed_index(INTERCEPT) {
        Some(i) => i,
        None => bail!(InvalidArgument, "model has no intercept"),
    };
    let iu = spec.fixed_index(URBAN);
    let field = match spec.block(FIELD) {
        Some(b) if matches!(b.kind, BlockKind::Spde { .. }) => b,
        _ => bail!(InvalidArgument, "model has no SPDE field block"),
    };
    let cluster_theta = spec.block(CLUSTER).map(|b| b.theta_offset);
    let n = grid.n_cells();
    if adjusted.len() != n || mask.urban.len() != n {
        bail!(Dimension, "cell inputs do not match the grid");
    }
    let centres: Vec<(f64, f64)> = (0..n).map(|k| grid.cell_center(k)).collect();
    let proj = mesh.projector(&centres)?;
    if proj.ncols() != field.len {
        bail!(Dimension, "mesh has {} nodes, field block has {}", proj.ncols(), field.len);
    }
    let ea_per_cell: Vec<usize> = match handling {
        NuggetHandling::PerCell => vec![1; n],
        NuggetHandling::EaCount => {
            let mut mass = vec![[0.0f64; 2]; grid.n_counties()];
            for k in 0..n {
                mass[grid.county_id[k]][if mask.urban[k] { 0 } else { 1 }] += adjusted[k];
            }
            (0..n)
                .map(|k| {
                    let (c, s) = (grid.county_id[k], if mask.urban[k] { 0 } else { 1 });
                    let share = if mass[c][s] > 0.0 { adjusted[k] / mass[c][s] } else { 0.0 };
                    (meta.eas[c][s] as f64 * share).round().max(1.0) as usize
                })
                .collect()
        }
    };
    let mut rng = rng::rng_for(seed, &[labels::AGGREGATE, 2]);
    let mut out = Vec::with_capacity(draws.n_draws());
    for j in 0..draws.n_draws() {
        let x = &draws.latent[j];
        let u = proj.mul_vec(&x[field.offset..field.offset + field.len]);
        let b0 = x[i0];
        let bu = iu.map_or(0.0, |i| x[i]);
        let sd = cluster_theta.map(|t| (-0.5 * draws.theta[j][t]).exp());
        out.push(
            (0..n)
                .map(|k| {
                    let eta = b0 + u[k] + if mask.urban[k] { bu } else { 0.0 };
                    ea_mean_prob(eta, sd, ea_per_cell[k], &mut rng)
                })
                .collect(),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_example() {
        let e = Bym2Effects {
            beta0: vec![-1.75],
            beta_urban: Some(vec![-1.0]),
            county: vec![vec![0.0]],
            cluster_sd: None,
        };
        let d = bym2_county_mixture(&e, &[0.5], &[[1, 1]], 0).unwrap();
        let want = 0.5 * expit(-1.75) + 0.5 * expit(-2.75);
        assert!((d.draws[0][0] - want).abs() < 1e-15);
        assert!((want - 0.1041).abs() < 5e-5);
    }

    #[test]
    fn mix_and_integrate_examples() {
        assert!((mix_urban_rural(&[0.2], &[0.4], 0.5).unwrap()[0] - 0.3).abs() < 1e-15);
        assert_eq!(mix_urban_rural(&[0.2], &[0.4], 0.0).unwrap(), vec![0.4]);
        assert!(mix_urban_rural(&[0.2], &[0.4, 0.1], 0.5).is_err());
        let d = integrate_surface(&[vec![0.1, 0.3]], &[1.0, 3.0], &[0, 0], 1).unwrap();
        assert!((d.draws[0][0] - 0.25).abs() < 1e-15);
        assert!(integrate_surface(&[vec![0.1]], &[0.0], &[0], 1).is_err());
    }

    #[test]
    fn ea_average_identity() {
        assert_eq!(ea_average(&[vec![0.3], vec![0.7]], 1).unwrap(), vec![0.3, 0.7]);
        assert!(ea_average(&[vec![0.3, 0.1]], 3).is_err());
    }
}
