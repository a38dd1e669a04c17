mod common;

use std::collections::BTreeMap;
use std::path::Path;

use saelab::harness::run_experiment;
use saelab_core::models::ModelKind;
use saelab_core::popgen::Scenario;
use saelab_core::survey::DesignKind;

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn naive_only_smoke_run() {
    let cfg = common::tiny(&["naive"]);
    let report = run_experiment(&cfg, None).unwrap();
    assert_eq!(report.cells.len(), 1);
    let cell = report.cell(Scenario::ALL[3], DesignKind::Stratified).unwrap();
    let row = cell.score("naive").unwrap();
    assert_eq!(row.n_replicates, cfg.design_replicates);
    assert!(row.mse >= 0.0 && (0.0..=1.0).contains(&row.coverage80));
    assert!(cell.failures.is_empty());
    assert_eq!(cell.truth.len(), 4);
}

#[test]
fn full_menu_runs_and_reports() {
    let models = ["naive", "direct", "smoothed_direct", "BYM2_Uca", "BYM2_UCA", "SPDE_uc", "SPDE_UCa"];
    let mut cfg = common::tiny(&models);
    cfg.scenarios = vec!["suc".into(), "SUC".into()];
    cfg.designs = vec!["Unstratified".into(), "Stratified".into()];
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, Some(dir.path())).unwrap();
    assert_eq!(report.cells.len(), 4);
    for cell in &report.cells {
        for m in models {
            let m = &m.parse::<ModelKind>().unwrap().to_string();
            let row = cell.score(m).unwrap_or_else(|| panic!("{} lacks {m}: {:?}", cell.label(), cell.failures));
            let expected = if m == "naive" || m == "direct" { cfg.design_replicates } else { cfg.replicates };
            assert_eq!(row.n_replicates, expected, "{m}");
            assert!(row.n_scored > 0, "{m}");
        }
        assert!(cell.param("BYM2_UCA", "Urban").is_some());
        assert!(cell.param("BYM2_Uc", "Urban").is_some());
        assert!(cell.param("SPDE_uc", "Range").is_some());
    }
    let files = read_tree(dir.path());
    for f in ["plot_data.csv", "summary.txt", "config.toml", "manifest.txt"] {
        assert!(files.contains_key(f), "{f} missing");
    }
    let plot = String::from_utf8(files["plot_data.csv"].clone()).unwrap();
    assert_eq!(plot.lines().count(), 1 + 4 * models.len() * 6);
}

#[test]
fn reruns_are_byte_identical() {
    let mut cfg = common::tiny(&["naive", "direct", "BYM2_UCa", "SPDE_UC"]);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&cfg, Some(a.path())).unwrap();
    cfg.threads = 2;
    run_experiment(&cfg, Some(b.path())).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (name, bytes) in &ta {
        if name == "manifest.txt" || name == "config.toml" {
            continue;
        }
        assert!(bytes == &tb[name], "{name} differs between runs");
    }
}

#[test]
fn single_county_single_replicate() {
    let mut cfg = common::tiny(&["naive"]);
    cfg.replicates = 1;
    cfg.design_replicates = 1;
    cfg.geometry.county_rows = 1;
    cfg.geometry.county_cols = 1;
    cfg.geometry.urban_targets = vec![0.3];
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, Some(dir.path())).unwrap();
    assert_eq!(report.cells[0].scores.len(), 1);
    let scores = std::fs::read_to_string(dir.path().join(report.cells[0].label()).join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 2);
}
