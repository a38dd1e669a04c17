//! Builders for the estimator menu: smoothed direct, BYM2 and SPDE models
//! with optional urban fixed effect and cluster nugget.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::design::LogitInput;
use crate::error::{bail, Error, Result};
use crate::gmrf::{Mesh, ScaledIcar, SpdeOperator, SpdeParts};
use crate::inference::{BlockKind, Draws, Likelihood, ModelSpec};
use crate::math::{expit, mean, quantile_sorted, sample_variance, sorted_copy};
use crate::priors::{pc_matern, pc_phi, pc_sd, HyperPrior, PcMaternPrior, PcPhiPrior, PcSdPrior};
use crate::sparse::CscMatrix;
use crate::survey::SurveyDataset;

pub const FIXED: &str = "fixed";
pub const COUNTY: &str = "county";
pub const CLUSTER: &str = "cluster";
pub const FIELD: &str = "field";
pub const INTERCEPT: &str = "intercept";
pub const URBAN: &str = "urban";

/// Urban fixed effect (`U`) and cluster nugget (`C`) switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariantFlags {
    pub urban: bool,
    pub cluster: bool,
}

impl VariantFlags {
    pub const ALL: [VariantFlags; 4] = [
        VariantFlags { urban: false, cluster: false },
        VariantFlags { urban: false, cluster: true },
        VariantFlags { urban: true, cluster: false },
        VariantFlags { urban: true, cluster: true },
    ];
}

impl core::fmt::Display for VariantFlags {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}{}", if self.urban { 'U' } else { 'u' }, if self.cluster { 'C' } else { 'c' })
    }
}

impl core::str::FromStr for VariantFlags {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let c: Vec<char> = s.chars().collect();
        match c.as_slice() {
            [u @ ('u' | 'U'), k @ ('c' | 'C')] => Ok(VariantFlags { urban: *u == 'U', cluster: *k == 'C' }),
            _ => Err(Error::Config(alloc::format!("unknown variant flags '{s}'"))),
        }
    }
}

/// Source of the urban fractions used when aggregating to counties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Weighting {
    /// True fractions from the population frame (`a`).
    True,
    /// Externally supplied fractions (`A`).
    Supplied,
}

/// Every estimator the laboratory can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Naive,
    Direct,
    SmoothedDirect,
    Bym2(VariantFlags, Weighting),
    Spde(VariantFlags, Weighting),
}

impl ModelKind {
    /// Design-based estimators need no model fit.
    pub fn is_design_based(&self) -> bool {
        matches!(self, ModelKind::Naive | ModelKind::Direct)
    }
}

impl core::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let w = |w: &Weighting| if *w == Weighting::Supplied { "A" } else { "" };
        match self {
            ModelKind::Naive => f.write_str("naive"),
            ModelKind::Direct => f.write_str("direct"),
            ModelKind::SmoothedDirect => f.write_str("smoothed_direct"),
            ModelKind::Bym2(v, wt) => write!(f, "BYM2_{v}{}", w(wt)),
            ModelKind::Spde(v, wt) => write!(f, "SPDE_{v}{}", w(wt)),
        }
    }
}

impl core::str::FromStr for ModelKind {
    type Err = Error;
    /// Accepts `naive`, `direct`, `smoothed_direct` and `BYM2_<flags>[a|A]`
    /// or `SPDE_<flags>[a|A]`; without a suffix true fractions are used.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => return Ok(ModelKind::Naive),
            "direct" => return Ok(ModelKind::Direct),
            "smoothed_direct" | "smoothed-direct" => return Ok(ModelKind::SmoothedDirect),
            _ => {}
        }
        let (family, rest) =
            s.split_once('_').ok_or_else(|| Error::Config(alloc::format!("unknown model '{s}'")))?;
        let (flags, weighting) = match rest.len() {
            2 => (rest, Weighting::True),
            3 => match &rest[2..] {
                "a" => (&rest[..2], Weighting::True),
                "A" => (&rest[..2], Weighting::Supplied),
                _ => bail!(Config, "unknown aggregation suffix in model '{s}'"),
            },
            _ => bail!(Config, "unknown model '{s}'"),
        };
        let flags: VariantFlags = flags.parse()?;
        match family.to_ascii_uppercase().as_str() {
            "BYM2" => Ok(ModelKind::Bym2(flags, weighting)),
            "SPDE" => Ok(ModelKind::Spde(flags, weighting)),
            _ => Err(Error::Config(alloc::format!("unknown model family in '{s}'"))),
        }
    }
}

/// Priors shared by all builders.
#[derive(Debug, Clone)]
pub struct ModelPriors {
    /// On the BYM2 total SD `tau^(-1/2)`.
    pub bym2_sd: PcSdPrior,
    pub phi: Arc<PcPhiPrior>,
    /// On the cluster nugget SD.
    pub cluster_sd: PcSdPrior,
    pub matern: PcMaternPrior,
    /// SD of the Gaussian prior on fixed effects.
    pub fixed_sd: f64,
}

impl ModelPriors {
    /// `P(sigma > 1) = 0.01` for every SD, `P(phi < 1/2) = 2/3`, Matérn range
    /// median at a fifth of the domain diameter, fixed effects `N(0, 1000)`.
    pub fn standard(icar: &ScaledIcar, diameter: f64) -> Result<Self> {
        let sd = pc_sd(1.0, 0.01)?;
        Ok(Self {
            bym2_sd: sd,
            phi: Arc::new(pc_phi(icar, 0.5, 2.0 / 3.0)?),
            cluster_sd: sd,
            matern: pc_matern(diameter)?,
            fixed_sd: 1000f64.sqrt(),
        })
    }

    fn bym2_block(&self, icar: &Arc<ScaledIcar>) -> BlockKind {
        BlockKind::Bym2 {
            icar: icar.clone(),
            precision_prior: HyperPrior::PcPrecision(self.bym2_sd),
            phi_prior: HyperPrior::PcPhi(self.phi.clone()),
        }
    }

    fn fixed_block(&self, urban: bool) -> BlockKind {
        let mut labels = vec![INTERCEPT.to_string()];
        if urban {
            labels.push(URBAN.to_string());
        }
        BlockKind::Fixed { labels, prior_sd: self.fixed_sd }
    }

    fn cluster_block(&self, n: usize) -> BlockKind {
        BlockKind::Iid { n, precision_prior: HyperPrior::PcPrecision(self.cluster_sd) }
    }
}

/// Mesh, operator and precision components of an SPDE field.
#[derive(Debug, Clone)]
pub struct SpdeModel {
    pub op: SpdeOperator,
    pub parts: Arc<SpdeParts>,
}

impl SpdeModel {
    pub fn new(mesh: Mesh) -> Result<Self> {
        let op = SpdeOperator::new(mesh)?;
        let parts = Arc::new(op.precision_parts()?);
        Ok(Self { op, parts })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.op.mesh
    }
}

/// Fay-Herriot style model on logit direct estimates with a BYM2 field.
pub fn build_smoothed_direct(input: &LogitInput, icar: &Arc<ScaledIcar>, priors: &ModelPriors) -> Result<ModelSpec> {
    let m = icar.m;
    if input.z.len() != m {
        bail!(Dimension, "{} direct estimates for {m} counties", input.z.len());
    }
    let used: Vec<usize> = (0..m).filter(|&i| input.available[i]).collect();
    if used.len() < 2 {
        bail!(InvalidArgument, "smoothed direct needs at least two usable counties, got {}", used.len());
    }
    let mut t = Vec::new();
    for (row, &i) in used.iter().enumerate() {
        t.push((row, 0, 1.0));
        t.push((row, 1 + i, 1.0));
    }
    let projector = CscMatrix::from_triplets(used.len(), 1 + 2 * m, &t);
    ModelSpec::new(
        Likelihood::Gaussian {
            z: used.iter().map(|&i| input.z[i]).collect(),
            v: used.iter().map(|&i| input.v[i]).collect(),
        },
        vec![(FIXED.into(), priors.fixed_block(false)), (COUNTY.into(), priors.bym2_block(icar))],
        projector,
    )
}

fn binomial_data(survey: &SurveyDataset) -> Likelihood {
    Likelihood::Binomial {
        y: survey.clusters.iter().map(|c| c.y_c).collect(),
        n: survey.clusters.iter().map(|c| c.n_c).collect(),
    }
}

fn fixed_triplets(survey: &SurveyDataset, flags: VariantFlags, t: &mut Vec<(usize, usize, f64)>) -> usize {
    for (k, c) in survey.clusters.iter().enumerate() {
        t.push((k, 0, 1.0));
        if flags.urban && c.urban {
            t.push((k, 1, 1.0));
        }
    }
    1 + flags.urban as usize
}

/// Cluster-level binomial model with a BYM2 county effect.
pub fn build_bym2(
    survey: &SurveyDataset,
    icar: &Arc<ScaledIcar>,
    flags: VariantFlags,
    priors: &ModelPriors,
) -> Result<ModelSpec> {
    let m = icar.m;
    if survey.n_counties != m {
        bail!(Dimension, "survey has {} counties, ICAR has {m}", survey.n_counties);
    }
    let n_obs = survey.clusters.len();
    let mut t = Vec::new();
    let p = fixed_triplets(survey, flags, &mut t);
    for (k, c) in survey.clusters.iter().enumerate() {
        if c.county >= m {
            bail!(Dimension, "cluster {k} maps to county {} of {m}", c.county);
        }
        t.push((k, p + c.county, 1.0));
        if flags.cluster {
            t.push((k, p + 2 * m + k, 1.0));
        }
    }
    let n_latent = p + 2 * m + if flags.cluster { n_obs } else { 0 };
    let mut blocks = vec![(FIXED.into(), priors.fixed_block(flags.urban)), (COUNTY.into(), priors.bym2_block(icar))];
    if flags.cluster {
        blocks.push((CLUSTER.into(), priors.cluster_block(n_obs)));
    }
    ModelSpec::new(binomial_data(survey), blocks, CscMatrix::from_triplets(n_obs, n_latent, &t))
}

/// Cluster-level binomial model with an SPDE field observed at cluster
/// locations through the mesh projector.
pub fn build_spde(
    survey: &SurveyDataset,
    spde: &SpdeModel,
    flags: VariantFlags,
    priors: &ModelPriors,
) -> Result<ModelSpec> {
    let n_obs = survey.clusters.len();
    let n_nodes = spde.op.n_nodes();
    let mut t = Vec::new();
    let p = fixed_triplets(survey, flags, &mut t);
    for (k, c) in survey.clusters.iter().enumerate() {
        for (node, w) in spde.mesh().locate(c.x, c.y)? {
            t.push((k, p + node, w));
        }
        if flags.cluster {
            t.push((k, p + n_nodes + k, 1.0));
        }
    }
    let n_latent = p + n_nodes + if flags.cluster { n_obs } else { 0 };
    let mut blocks = vec![
        (FIXED.into(), priors.fixed_block(flags.urban)),
        (FIELD.into(), BlockKind::Spde { parts: spde.parts.clone(), prior: HyperPrior::PcMatern(priors.matern) }),
    ];
    if flags.cluster {
        blocks.push((CLUSTER.into(), priors.cluster_block(n_obs)));
    }
    ModelSpec::new(binomial_data(survey), blocks, CscMatrix::from_triplets(n_obs, n_latent, &t))
}

/// Posterior summary of one interpretable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
}

impl ParamSummary {
    pub fn from_values(name: &str, values: &[f64]) -> Self {
        let s = sorted_copy(values);
        Self {
            name: name.to_string(),
            mean: mean(values),
            sd: if values.len() > 1 { sample_variance(values).sqrt() } else { 0.0 },
            q10: quantile_sorted(&s, 0.1),
            q50: quantile_sorted(&s, 0.5),
            q90: quantile_sorted(&s, 0.9),
        }
    }
}

/// Fixed effects and natural-scale hyperparameters: `Intercept`, `Urban`,
/// `Cluster Var`, `Phi`, `Tot. Var`, `Spatial SD` and `Range`.
pub fn parameter_summaries(spec: &ModelSpec, draws: &Draws) -> Vec<ParamSummary> {
    let mut out = Vec::new();
    if let Some(i) = spec.fixed_index(INTERCEPT) {
        out.push(ParamSummary::from_values("Intercept", &draws.coordinate(i)));
    }
    if let Some(i) = spec.fixed_index(URBAN) {
        out.push(ParamSummary::from_values("Urban", &draws.coordinate(i)));
    }
    for b in &spec.blocks {
        let th = b.theta_offset;
        let col = |f: &dyn Fn(&[f64]) -> f64| -> Vec<f64> { draws.theta.iter().map(|t| f(&t[th..])).collect() };
        match &b.kind {
            BlockKind::Iid { .. } => out.push(ParamSummary::from_values("Cluster Var", &col(&|t| (-t[0]).exp()))),
            BlockKind::Bym2 { .. } => {
                out.push(ParamSummary::from_values("Phi", &col(&|t| expit(t[1]))));
                out.push(ParamSummary::from_values("Tot. Var", &col(&|t| (-t[0]).exp())));
                out.push(ParamSummary::from_values("Spatial SD", &col(&|t| (expit(t[1]) * (-t[0]).exp()).sqrt())));
            }
            BlockKind::Spde { .. } => {
                out.push(ParamSummary::from_values("Range", &col(&|t| t[0].exp())));
                out.push(ParamSummary::from_values("Spatial SD", &col(&|t| t[1].exp())));
            }
            BlockKind::Fixed { .. } => {}
        }
    }
    out
}
