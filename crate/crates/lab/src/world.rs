//! Fixed geometry and sampling frame shared by all scenarios of an
//! experiment, plus the per-scenario populations.

use std::sync::Arc;

use saelab_core::aggregate::{adjust_density, StratumMeta};
use saelab_core::geodata::{
    build_county_grid, county_adjacency, threshold_urbanicity, CountyLayout, DensityFieldParams, DensityGrid,
    UrbanMask,
};
use saelab_core::gmrf::{icar_scaled, Mesh, ScaledIcar};
use saelab_core::models::{ModelPriors, SpdeModel};
use saelab_core::popgen::{
    realize_outcomes, simulate_risk, synthesize_frame, FrameConfig, OutcomeLedger, PopulationFrame, RiskSurface,
    Scenario, ScenarioParams, TruthTable,
};
use saelab_core::rng::{derive_seed, labels};
use saelab_core::survey::{split_total, DesignKind, DesignSpec};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::io;

/// Everything that does not change across scenarios and replicates.
#[derive(Debug, Clone)]
pub struct World {
    pub grid: DensityGrid,
    pub mask: UrbanMask,
    /// Scaled ICAR and model priors; absent with a single county, where only
    /// the design-based estimators apply.
    pub icar: Option<Arc<ScaledIcar>>,
    pub spde: SpdeModel,
    pub frame: PopulationFrame,
    pub priors: Option<ModelPriors>,
    /// Stratum sizes and urban fractions from the frame (`a`).
    pub meta_true: StratumMeta,
    /// Fractions implied by EA counts and nominal EA sizes (`A`).
    pub meta_supplied: StratumMeta,
    /// Density rescaled to the stratum targets of each metadata table.
    pub adjusted_true: Vec<f64>,
    pub adjusted_supplied: Vec<f64>,
    pub range: f64,
    seed: u64,
}

/// One scenario's risk surface, outcomes and truths.
#[derive(Debug, Clone)]
pub struct Population {
    pub scenario: Scenario,
    pub params: ScenarioParams,
    pub risk: RiskSurface,
    pub ledger: OutcomeLedger,
    pub truth: TruthTable,
}

pub fn design_index(kind: DesignKind) -> u64 {
    match kind {
        DesignKind::Unstratified => 0,
        DesignKind::Stratified => 1,
    }
}

/// Seed of one survey replicate.
pub fn replicate_seed(master: u64, scenario: Scenario, design: DesignKind, replicate: usize) -> u64 {
    derive_seed(master, &[labels::SURVEY, scenario.code(), design_index(design), replicate as u64])
}

fn ea_counts(mask: &UrbanMask, per_county: usize, min_stratum: usize) -> Vec<[usize; 2]> {
    mask.urban_fraction
        .iter()
        .map(|&q| {
            if q <= 0.0 {
                [0, per_county]
            } else if q >= 1.0 {
                [per_county, 0]
            } else {
                let lo = min_stratum.min(per_county / 2);
                let u = ((per_county as f64 * q).round() as usize).clamp(lo, per_county - lo);
                [u, per_county - u]
            }
        })
        .collect()
}

impl World {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let g = &cfg.geometry;
        let grid = match (&g.density_raster, &g.county_raster) {
            (Some(d), Some(c)) => io::grid_from_rasters(d, c)?,
            _ => build_county_grid(
                CountyLayout { county_rows: g.county_rows, county_cols: g.county_cols },
                g.nrows,
                g.ncols,
                g.cell_size,
                &DensityFieldParams {
                    log_mean: g.density_log_mean,
                    log_sd: g.density_log_sd,
                    length_scale: g.density_length_scale,
                    n_features: g.density_features,
                },
                cfg.seed,
            )?,
        };
        let m = grid.n_counties();
        if g.urban_targets.len() != m {
            return Err(LabError::Config(format!("{} urban targets for {m} counties", g.urban_targets.len())));
        }
        let mask = threshold_urbanicity(&grid, &g.urban_targets)?;
        let icar = if m >= 2 { Some(Arc::new(icar_scaled(&county_adjacency(&grid)?)?)) } else { None };
        let spde = SpdeModel::new(Mesh::regular(grid.bounding_box(), g.mesh_buffer, g.mesh_spacing)?)?;
        let frame_cfg = FrameConfig::with_counts(ea_counts(&mask, g.eas_per_county, g.min_stratum_eas));
        let frame = synthesize_frame(&grid, &mask, &frame_cfg, cfg.seed)?;
        let priors = icar.as_ref().map(|i| ModelPriors::standard(i, grid.diameter())).transpose()?;
        let meta_true = StratumMeta::from_frame(&frame);
        let meta_supplied = match &cfg.aggregation.supplied_meta {
            Some(p) => io::read_stratum_meta(p, m)?,
            None => StratumMeta::from_counts(
                frame.stratum_counts(),
                cfg.aggregation.expected_urban,
                cfg.aggregation.expected_rural,
            )?,
        };
        let adjusted_true = adjust_density(&grid, &mask, &meta_true)?;
        let adjusted_supplied = adjust_density(&grid, &mask, &meta_supplied)?;
        let range = cfg.population.range_fraction * grid.diameter();
        Ok(Self {
            grid,
            mask,
            icar,
            spde,
            frame,
            priors,
            meta_true,
            meta_supplied,
            adjusted_true,
            adjusted_supplied,
            range,
            seed: cfg.seed,
        })
    }

    /// ICAR and priors for model-based fits.
    pub fn model_inputs(&self) -> Result<(&Arc<ScaledIcar>, &ModelPriors)> {
        match (&self.icar, &self.priors) {
            (Some(i), Some(p)) => Ok((i, p)),
            _ => Err(LabError::Config("model-based estimators need at least two counties".into())),
        }
    }

    pub fn n_counties(&self) -> usize {
        self.frame.n_counties
    }

    pub fn scenario_params(&self, cfg: &ExperimentConfig, scenario: Scenario) -> ScenarioParams {
        let p = &cfg.population;
        ScenarioParams {
            scenario,
            beta0: p.beta0,
            beta_urban: p.beta_urban,
            sigma_spatial: p.sigma_spatial,
            range: self.range,
            sigma_cluster: p.sigma_cluster,
        }
    }

    /// The population of a scenario; the same for every design and replicate.
    pub fn population(&self, cfg: &ExperimentConfig, scenario: Scenario) -> Result<Population> {
        let params = self.scenario_params(cfg, scenario);
        let seed = derive_seed(self.seed, &[labels::RISK, scenario.code()]);
        let risk = simulate_risk(&self.frame, &params, &self.spde.op, seed)?;
        let (ledger, truth) = realize_outcomes(&self.frame, &risk, seed)?;
        Ok(Population { scenario, params, risk, ledger, truth })
    }

    /// Cluster allocation of a design. Unstratified designs split each
    /// county total proportionally; stratified designs give the urban
    /// stratum the share `q^k` with at least `min_stratum_clusters` in each
    /// non-empty stratum, capped so that PPS inclusion probabilities stay
    /// below one.
    pub fn design(&self, cfg: &ExperimentConfig, kind: DesignKind) -> DesignSpec {
        let s = &cfg.survey;
        let m = self.n_counties();
        let total = s.clusters_per_county;
        let avail = self.frame.stratum_counts();
        // PPS needs n * max(H) <= sum(H) in every stratum.
        let pps_cap: Vec<usize> = self
            .frame
            .strata
            .iter()
            .map(|st| {
                let h: Vec<f64> = st.iter().map(|&k| self.frame.eas[k].households as f64).collect();
                let max = h.iter().cloned().fold(0.0, f64::max);
                if max > 0.0 {
                    (h.iter().sum::<f64>() / max).floor() as usize
                } else {
                    0
                }
            })
            .collect();
        let stratum_counts = (0..m)
            .map(|c| {
                let q = self.frame.urban_child_fraction[c];
                let [mut u, _] = split_total(total, q.powf(s.urban_oversampling));
                if avail[c][0] > 0 && avail[c][1] > 0 {
                    let lo = s.min_stratum_clusters.min(total / 2);
                    u = u.clamp(lo, total - lo);
                } else if avail[c][1] == 0 {
                    u = total;
                } else {
                    u = 0;
                }
                u = u.min(avail[c][0]).min(pps_cap[2 * c]);
                let r = (total - u).min(avail[c][1]).min(pps_cap[2 * c + 1]);
                [u, r]
            })
            .collect();
        DesignSpec {
            kind,
            county_totals: vec![total; m],
            stratum_counts,
            households_per_cluster: s.households_per_cluster,
        }
    }
}
