use saelab::ExperimentConfig;
use saelab_core::models::ModelKind;

#[test]
fn preset_is_valid_and_round_trips() {
    let cfg = ExperimentConfig::preset("mini-kenya").unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.n_counties(), 16);
    assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    assert!(ExperimentConfig::preset("atlantis").is_err());
}

#[test]
fn example_config_file_matches_preset() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mini-kenya.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    let mut preset = ExperimentConfig::preset("mini-kenya").unwrap();
    preset.out_dir = cfg.out_dir.clone();
    assert_eq!(cfg, preset);
}

#[test]
fn partial_files_fill_in_defaults() {
    let cfg = ExperimentConfig::from_toml_str("seed = 7\nmodels = [\"naive\", \"BYM2_UCA\"]\n[survey]\nclusters_per_county = 10\n").unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.survey.clusters_per_county, 10);
    assert_eq!(cfg.survey.households_per_cluster, 25);
    assert_eq!(cfg.model_list().unwrap().len(), 2);
    assert!(matches!(cfg.model_list().unwrap()[1], ModelKind::Bym2(..)));
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(ExperimentConfig::from_toml_str("sed = 7").is_err());
    assert!(ExperimentConfig::from_toml_str("models = [\"BYM3\"]").and_then(|c| c.validate()).is_err());
    assert!(ExperimentConfig::from_toml_str("scenarios = [\"XYZ\"]").and_then(|c| c.validate()).is_err());
    assert!(ExperimentConfig::from_toml_str("replicates = 0").and_then(|c| c.validate()).is_err());
    let bad_targets = "[geometry]\nurban_targets = [0.5]\n";
    assert!(ExperimentConfig::from_toml_str(bad_targets).and_then(|c| c.validate()).is_err());
}
