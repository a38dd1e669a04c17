//! Experiment configuration and the `mini-kenya` preset.
//!
//! Configurations are TOML documents; every key has a default equal to the
//! preset, so a file only needs the keys it changes. See
//! `configs/mini-kenya.toml` for the annotated schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use saelab_core::aggregate::NuggetHandling;
use saelab_core::models::ModelKind;
use saelab_core::popgen::Scenario;
use saelab_core::survey::DesignKind;

use crate::error::{io_err, LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Scenario codes such as `SUC` or `Pop_suc`.
    pub scenarios: Vec<String>,
    /// `Unstratified` and/or `Stratified`.
    pub designs: Vec<String>,
    /// Model labels, e.g. `naive`, `direct`, `smoothed_direct`, `BYM2_UCa`.
    pub models: Vec<String>,
    /// Replicates for model-based estimators.
    pub replicates: usize,
    /// Replicates for the naive and direct estimators (at least `replicates`).
    pub design_replicates: usize,
    /// Posterior draws per fit.
    pub draws: usize,
    /// Worker threads; 0 uses all available cores.
    pub threads: usize,
    pub geometry: GeometryConfig,
    pub population: PopulationConfig,
    pub survey: SurveyConfig,
    pub inference: InferenceConfig,
    pub aggregation: AggregationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub nrows: usize,
    pub ncols: usize,
    pub county_rows: usize,
    pub county_cols: usize,
    pub cell_size: f64,
    pub density_log_mean: f64,
    pub density_log_sd: f64,
    pub density_length_scale: f64,
    pub density_features: usize,
    /// Target urban share of population mass per county.
    pub urban_targets: Vec<f64>,
    pub eas_per_county: usize,
    /// Smallest EA count of a non-empty stratum.
    pub min_stratum_eas: usize,
    pub mesh_spacing: f64,
    pub mesh_buffer: f64,
    /// Optional ESRI ASCII rasters replacing the synthetic density and
    /// county layout; both must be given together.
    pub density_raster: Option<PathBuf>,
    pub county_raster: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub beta0: f64,
    pub beta_urban: f64,
    pub sigma_spatial: f64,
    pub sigma_cluster: f64,
    /// Matérn range as a fraction of the domain diameter.
    pub range_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurveyConfig {
    pub clusters_per_county: usize,
    pub households_per_cluster: u32,
    /// Stratified designs give the urban stratum the share `q^k` of a
    /// county's clusters, where `q` is the urban child fraction and `k` this
    /// exponent; `k < 1` oversamples urban areas.
    pub urban_oversampling: f64,
    /// Smallest cluster count of a non-empty stratum under stratification.
    pub min_stratum_clusters: usize,
    /// Apply the finite population correction in the direct estimator.
    pub fpc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub points_per_dim: usize,
    pub span: f64,
    pub max_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    /// Nominal children per urban and rural EA for the `A` variants.
    pub expected_urban: f64,
    pub expected_rural: f64,
    /// `per-cell` or `ea-count`.
    pub nugget: String,
    /// Optional stratum table (`county,C_iU,C_iR,E_U,E_R,q_U`) for `A`.
    pub supplied_meta: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "mini-kenya".into(),
            seed: 20240601,
            out_dir: PathBuf::from("out"),
            scenarios: vec!["SUC".into()],
            designs: vec!["Stratified".into()],
            models: ["naive", "direct", "BYM2_uc", "BYM2_UCa", "SPDE_UC"].map(String::from).to_vec(),
            replicates: 50,
            design_replicates: 50,
            draws: 1000,
            threads: 0,
            geometry: GeometryConfig::default(),
            population: PopulationConfig::default(),
            survey: SurveyConfig::default(),
            inference: InferenceConfig::default(),
            aggregation: AggregationConfig::default(),
        }
    }
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            nrows: 64,
            ncols: 64,
            county_rows: 4,
            county_cols: 4,
            cell_size: 1.0 / 64.0,
            density_log_mean: 0.0,
            density_log_sd: 1.0,
            density_length_scale: 0.12,
            density_features: 200,
            urban_targets: vec![
                1.0, 0.7, 0.5, 0.4, 0.35, 0.3, 0.25, 0.2, 0.2, 0.15, 0.15, 0.12, 0.1, 0.08, 0.06, 0.05,
            ],
            eas_per_county: 250,
            min_stratum_eas: 6,
            mesh_spacing: 0.05,
            mesh_buffer: 0.1,
            density_raster: None,
            county_raster: None,
        }
    }
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self { beta0: -1.75, beta_urban: -1.0, sigma_spatial: 0.15, sigma_cluster: 0.1, range_fraction: 0.2 }
    }
}

impl Default for SurveyConfig {
    fn default() -> Self {
        Self {
            clusters_per_county: 20,
            households_per_cluster: 25,
            urban_oversampling: 0.5,
            min_stratum_clusters: 2,
            fpc: false,
        }
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { points_per_dim: 5, span: 3.0, max_points: 625 }
    }
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self { expected_urban: 60.0, expected_rural: 90.0, nugget: "per-cell".into(), supplied_meta: None }
    }
}

impl ExperimentConfig {
    /// Named presets; only `mini-kenya` exists.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mini-kenya" => Ok(Self::default()),
            other => Err(LabError::Config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative raster and table paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.geometry.density_raster,
            &mut cfg.geometry.county_raster,
            &mut cfg.aggregation.supplied_meta,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn scenario_list(&self) -> Result<Vec<Scenario>> {
        self.scenarios.iter().map(|s| s.parse().map_err(LabError::from)).collect()
    }

    pub fn design_list(&self) -> Result<Vec<DesignKind>> {
        self.designs.iter().map(|s| s.parse().map_err(LabError::from)).collect()
    }

    pub fn model_list(&self) -> Result<Vec<ModelKind>> {
        self.models.iter().map(|s| s.parse().map_err(LabError::from)).collect()
    }

    pub fn nugget_handling(&self) -> Result<NuggetHandling> {
        match self.aggregation.nugget.as_str() {
            "per-cell" => Ok(NuggetHandling::PerCell),
            "ea-count" => Ok(NuggetHandling::EaCount),
            other => Err(LabError::Config(format!("unknown nugget handling '{other}'"))),
        }
    }

    pub fn n_counties(&self) -> usize {
        self.geometry.county_rows * self.geometry.county_cols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.replicates == 0 || self.design_replicates == 0 {
            return bad("replicate counts must be at least 1".into());
        }
        if self.draws < 2 {
            return bad("at least two posterior draws are needed".into());
        }
        if self.scenarios.is_empty() || self.designs.is_empty() || self.models.is_empty() {
            return bad("scenario, design and model lists must be nonempty".into());
        }
        self.scenario_list()?;
        self.design_list()?;
        self.model_list()?;
        self.nugget_handling()?;
        let g = &self.geometry;
        if g.density_raster.is_some() != g.county_raster.is_some() {
            return bad("density_raster and county_raster must be given together".into());
        }
        if g.density_raster.is_none() && g.urban_targets.len() != self.n_counties() {
            return bad(format!("{} urban targets for {} counties", g.urban_targets.len(), self.n_counties()));
        }
        if g.urban_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("urban targets must lie in [0, 1]".into());
        }
        if !(g.cell_size > 0.0) || !(g.mesh_spacing > 0.0) || !(g.mesh_buffer >= 0.0) {
            return bad("cell size and mesh spacing must be positive".into());
        }
        if g.eas_per_county == 0 {
            return bad("eas_per_county must be positive".into());
        }
        let p = &self.population;
        if !(p.range_fraction > 0.0) || !(p.sigma_spatial >= 0.0) || !(p.sigma_cluster >= 0.0) {
            return bad("population range and standard deviations must be nonnegative (range positive)".into());
        }
        let s = &self.survey;
        if s.clusters_per_county == 0 || s.households_per_cluster == 0 || !(s.urban_oversampling > 0.0) {
            return bad("survey sizes and oversampling exponent must be positive".into());
        }
        let i = &self.inference;
        if i.points_per_dim == 0 || i.max_points == 0 || !(i.span > 0.0) {
            return bad("inference grid settings must be positive".into());
        }
        if !(self.aggregation.expected_urban > 0.0) || !(self.aggregation.expected_rural > 0.0) {
            return bad("expected children per EA must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_round_trips_through_toml() {
        let cfg = ExperimentConfig::preset("mini-kenya").unwrap();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::from_toml_str("bogus_key = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("models = [\"BYM3_uc\"]").is_err());
    }
}
