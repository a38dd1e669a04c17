//! Small synthetic world shared by the integration tests.

#![allow(dead_code)]

use std::sync::Arc;

use saelab_core::geodata::{build_county_grid, county_adjacency, threshold_urbanicity, CountyLayout, DensityFieldParams, DensityGrid, UrbanMask};
use saelab_core::gmrf::{icar_scaled, Mesh, ScaledIcar};
use saelab_core::models::{ModelPriors, SpdeModel};
use saelab_core::popgen::{
    realize_outcomes, simulate_risk, synthesize_frame, FrameConfig, OutcomeLedger, PopulationFrame, Scenario,
    ScenarioParams, TruthTable,
};
use saelab_core::survey::{DesignKind, DesignSpec};

pub struct Fixture {
    pub grid: DensityGrid,
    pub mask: UrbanMask,
    pub icar: Arc<ScaledIcar>,
    pub spde: SpdeModel,
    pub frame: PopulationFrame,
    pub priors: ModelPriors,
    pub ledger: OutcomeLedger,
    pub truth: TruthTable,
}

/// 2x2 counties on a 16x16 grid of the unit square with 20 EAs per stratum.
pub fn fixture(seed: u64, scenario: Scenario) -> Fixture {
    let field = DensityFieldParams { log_mean: 0.0, log_sd: 1.0, length_scale: 0.15, n_features: 100 };
    let grid = build_county_grid(CountyLayout { county_rows: 2, county_cols: 2 }, 16, 16, 1.0 / 16.0, &field, seed).unwrap();
    let mask = threshold_urbanicity(&grid, &[0.6, 0.4, 0.3, 0.2]).unwrap();
    let icar = Arc::new(icar_scaled(&county_adjacency(&grid).unwrap()).unwrap());
    let spde = SpdeModel::new(Mesh::regular(grid.bounding_box(), 0.1, 0.1).unwrap()).unwrap();
    let frame = synthesize_frame(&grid, &mask, &FrameConfig::with_counts(vec![[20, 20]; 4]), seed).unwrap();
    let priors = ModelPriors::standard(&icar, grid.diameter()).unwrap();
    let params = ScenarioParams {
        scenario,
        beta0: -1.75,
        beta_urban: -1.0,
        sigma_spatial: 0.15,
        range: 0.2,
        sigma_cluster: 0.1,
    };
    let risk = simulate_risk(&frame, &params, &spde.op, seed).unwrap();
    let (ledger, truth) = realize_outcomes(&frame, &risk, seed).unwrap();
    Fixture { grid, mask, icar, spde, frame, priors, ledger, truth }
}

pub fn stratified(per_stratum: usize) -> DesignSpec {
    DesignSpec {
        kind: DesignKind::Stratified,
        county_totals: Vec::new(),
        stratum_counts: vec![[per_stratum; 2]; 4],
        households_per_cluster: 25,
    }
}

pub fn unstratified(per_county: usize) -> DesignSpec {
    DesignSpec {
        kind: DesignKind::Unstratified,
        county_totals: vec![per_county; 4],
        stratum_counts: Vec::new(),
        households_per_cluster: 25,
    }
}
