#![allow(dead_code)]

use saelab::ExperimentConfig;

/// A 2x2-county configuration that runs in seconds.
pub fn tiny(models: &[&str]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = "tiny".into();
    cfg.seed = 42;
    cfg.models = models.iter().map(|m| m.to_string()).collect();
    cfg.replicates = 3;
    cfg.design_replicates = 4;
    cfg.draws = 200;
    cfg.threads = 1;
    let g = &mut cfg.geometry;
    g.nrows = 16;
    g.ncols = 16;
    g.county_rows = 2;
    g.county_cols = 2;
    g.cell_size = 1.0 / 16.0;
    g.density_features = 50;
    g.urban_targets = vec![0.6, 0.4, 0.3, 0.2];
    g.eas_per_county = 40;
    g.mesh_spacing = 0.1;
    cfg.survey.clusters_per_county = 6;
    cfg
}
