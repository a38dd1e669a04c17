//! Fits one survey with every requested estimator and aggregates the
//! results to county predictions.

use saelab_core::aggregate::{
    bym2_county_mixture, integrate_surface, smoothed_direct_draws, spde_cell_draws, Bym2Effects, CountyDraws,
    NuggetHandling,
};
use saelab_core::design::{direct_estimate, logit_transform, naive_estimate, CountyEstimates, DirectOptions};
use saelab_core::inference::{fit_lgm, sample_posterior, Draws, GridConfig, ModelSpec, PosteriorFit};
use saelab_core::models::{
    build_bym2, build_smoothed_direct, build_spde, parameter_summaries, ModelKind, ParamSummary, VariantFlags,
    Weighting,
};
use saelab_core::rng::{derive_seed, labels};
use saelab_core::survey::SurveyDataset;

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::world::World;

/// Settings shared by every fit of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub draws: usize,
    pub grid: GridConfig,
    pub nugget: NuggetHandling,
    pub fpc: bool,
}

impl FitSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let grid = GridConfig {
            points_per_dim: cfg.inference.points_per_dim,
            span: cfg.inference.span,
            max_points: cfg.inference.max_points,
            ..GridConfig::default()
        };
        Ok(Self { draws: cfg.draws, grid, nugget: cfg.nugget_handling()?, fpc: cfg.survey.fpc })
    }
}

/// A latent Gaussian model shared by the aggregation variants built on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    SmoothedDirect,
    Bym2(VariantFlags),
    Spde(VariantFlags),
}

impl Family {
    pub fn of(kind: ModelKind) -> Option<Family> {
        match kind {
            ModelKind::Naive | ModelKind::Direct => None,
            ModelKind::SmoothedDirect => Some(Family::SmoothedDirect),
            ModelKind::Bym2(f, _) => Some(Family::Bym2(f)),
            ModelKind::Spde(f, _) => Some(Family::Spde(f)),
        }
    }

    /// Stable label used in seed derivation.
    pub fn code(&self) -> u64 {
        let flags = |f: &VariantFlags| 2 * f.urban as u64 + f.cluster as u64;
        match self {
            Family::SmoothedDirect => 1,
            Family::Bym2(f) => 16 + flags(f),
            Family::Spde(f) => 32 + flags(f),
        }
    }
}

fn kind_code(kind: ModelKind) -> u64 {
    match kind {
        ModelKind::Naive => 2,
        ModelKind::Direct => 3,
        other => {
            let w = match other {
                ModelKind::Bym2(_, Weighting::Supplied) | ModelKind::Spde(_, Weighting::Supplied) => 8,
                _ => 0,
            };
            Family::of(other).map_or(0, |f| f.code()) + w
        }
    }
}

/// A fitted model with its posterior draws.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub family: Family,
    pub spec: ModelSpec,
    pub fit: PosteriorFit,
    pub draws: Draws,
}

pub fn build_spec(family: Family, survey: &SurveyDataset, world: &World, fpc: bool) -> Result<ModelSpec> {
    let (icar, priors) = world.model_inputs()?;
    Ok(match family {
        Family::SmoothedDirect => {
            let input = logit_transform(&direct_estimate(survey, DirectOptions { fpc }));
            build_smoothed_direct(&input, icar, priors)?
        }
        Family::Bym2(f) => build_bym2(survey, icar, f, priors)?,
        Family::Spde(f) => build_spde(survey, &world.spde, f, priors)?,
    })
}

pub fn fit_family(
    family: Family,
    survey: &SurveyDataset,
    world: &World,
    settings: &FitSettings,
    seed: u64,
) -> Result<FittedModel> {
    let spec = build_spec(family, survey, world, settings.fpc)?;
    let fit = fit_lgm(&spec, &settings.grid)?;
    let draws = sample_posterior(&fit, &spec, settings.draws, derive_seed(seed, &[labels::FIT, family.code()]))?;
    Ok(FittedModel { family, spec, fit, draws })
}

/// County draws of a model variant from a family's posterior draws.
pub fn aggregate_draws(
    kind: ModelKind,
    spec: &ModelSpec,
    draws: &Draws,
    world: &World,
    settings: &FitSettings,
    seed: u64,
) -> Result<CountyDraws> {
    let seed = derive_seed(seed, &[labels::AGGREGATE, kind_code(kind)]);
    let meta = |w: Weighting| match w {
        Weighting::True => (&world.meta_true, &world.adjusted_true),
        Weighting::Supplied => (&world.meta_supplied, &world.adjusted_supplied),
    };
    Ok(match kind {
        ModelKind::SmoothedDirect => smoothed_direct_draws(spec, draws)?,
        ModelKind::Bym2(_, w) => {
            let (m, _) = meta(w);
            bym2_county_mixture(&Bym2Effects::from_draws(spec, draws)?, &m.rural_fraction(), &m.eas, seed)?
        }
        ModelKind::Spde(_, w) => {
            let (m, adjusted) = meta(w);
            let cells = spde_cell_draws(
                spec,
                draws,
                world.spde.mesh(),
                &world.grid,
                &world.mask,
                settings.nugget,
                adjusted,
                m,
                seed,
            )?;
            integrate_surface(&cells, adjusted, &world.grid.county_id, world.n_counties())?
        }
        ModelKind::Naive | ModelKind::Direct => {
            return Err(saelab_core::Error::InvalidArgument(format!("{kind} is not a fitted model")).into())
        }
    })
}

/// County predictions of one estimator on one survey.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub kind: ModelKind,
    pub estimates: CountyEstimates,
    /// `draws[county][j]` for model-based estimators.
    pub draws: Option<Vec<Vec<f64>>>,
    pub params: Vec<ParamSummary>,
    /// Grid points whose inner optimization did not converge.
    pub n_nonconverged: usize,
}

/// Runs every estimator in `kinds` on one survey. Variants sharing a
/// latent model share its fit. Each entry carries its own result so one
/// failing model does not discard the others.
pub fn run_models(
    kinds: &[ModelKind],
    survey: &SurveyDataset,
    world: &World,
    settings: &FitSettings,
    seed: u64,
) -> Vec<(ModelKind, Result<ModelOutput>)> {
    let mut fits: Vec<(Family, std::result::Result<FittedModel, String>)> = Vec::new();
    kinds
        .iter()
        .map(|&kind| {
            let out = match kind {
                ModelKind::Naive => Ok(design_output(kind, naive_estimate(survey))),
                ModelKind::Direct => Ok(design_output(kind, direct_estimate(survey, DirectOptions { fpc: settings.fpc }))),
                _ => {
                    let family = Family::of(kind).expect("model-based kind");
                    if !fits.iter().any(|(f, _)| *f == family) {
                        let r = fit_family(family, survey, world, settings, seed).map_err(|e| e.to_string());
                        fits.push((family, r));
                    }
                    let fitted = &fits.iter().find(|(f, _)| *f == family).expect("fit cached").1;
                    match fitted {
                        Ok(fm) => model_output(kind, fm, world, settings, seed),
                        Err(msg) => Err(LabError::Fit(msg.clone())),
                    }
                }
            };
            (kind, out)
        })
        .collect()
}

fn design_output(kind: ModelKind, estimates: CountyEstimates) -> ModelOutput {
    ModelOutput { kind, estimates, draws: None, params: Vec::new(), n_nonconverged: 0 }
}

fn model_output(
    kind: ModelKind,
    fm: &FittedModel,
    world: &World,
    settings: &FitSettings,
    seed: u64,
) -> Result<ModelOutput> {
    let county = aggregate_draws(kind, &fm.spec, &fm.draws, world, settings, seed)?;
    Ok(ModelOutput {
        kind,
        estimates: county.summarize(),
        draws: Some(county.draws),
        params: parameter_summaries(&fm.spec, &fm.draws),
        n_nonconverged: fm.fit.n_nonconverged(),
    })
}
