mod common;

use saelab::harness::plot_rows;
use saelab::io::{self, AsciiRaster, EstimateKey, ScoreCsvRow};
use saelab::world::World;
use saelab_core::design::{direct_estimate, DirectOptions};
use saelab_core::models::ParamSummary;
use saelab_core::popgen::Scenario;
use saelab_core::scoring::ScoreRow;
use saelab_core::survey::{draw_survey, DesignKind};

fn score(model: &str, bias: f64) -> ScoreRow {
    ScoreRow {
        model: model.into(),
        bias,
        var: 1e-5,
        mse: 2e-4,
        crps: 3e-3,
        coverage80: 0.8,
        width80: 0.12,
        n_replicates: 5,
        n_excluded: 0,
        n_scored: 80,
    }
}

#[test]
fn raster_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let r = AsciiRaster {
        ncols: 3,
        nrows: 2,
        xll: 1.5,
        yll: -2.0,
        cell_size: 0.25,
        nodata: -9999.0,
        values: vec![0.0, 1.5, 2.25, 3.0, -9999.0, 7.125],
    };
    let p = dir.path().join("r.asc");
    io::write_ascii_raster(&p, &r).unwrap();
    assert_eq!(io::read_ascii_raster(&p).unwrap(), r);
    // The file lists the northern row first.
    let text = std::fs::read_to_string(&p).unwrap();
    let first_data = text.lines().find(|l| !l.chars().next().unwrap().is_alphabetic()).unwrap();
    assert!(first_data.starts_with('3'));
}

#[test]
fn malformed_raster_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.asc");
    std::fs::write(&p, "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2\n3\n").unwrap();
    assert!(io::read_ascii_raster(&p).is_err());
}

#[test]
fn world_rasters_rebuild_the_grid() {
    let cfg = common::tiny(&["naive"]);
    let world = World::build(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let [density, county, _] = io::grid_rasters(&world.grid, &world.mask.urban);
    let (dp, cp) = (dir.path().join("d.asc"), dir.path().join("c.asc"));
    io::write_ascii_raster(&dp, &density).unwrap();
    io::write_ascii_raster(&cp, &county).unwrap();
    let grid = io::grid_from_rasters(&dp, &cp).unwrap();
    assert_eq!(grid.county_id, world.grid.county_id);
    for (a, b) in grid.values.iter().zip(&world.grid.values) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn survey_and_estimates_round_trip() {
    let cfg = common::tiny(&["naive"]);
    let world = World::build(&cfg).unwrap();
    let pop = world.population(&cfg, Scenario::ALL[3]).unwrap();
    let survey = draw_survey(&world.frame, &pop.ledger, &world.design(&cfg, DesignKind::Stratified), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sp = dir.path().join("survey.csv");
    io::write_survey(&sp, &survey).unwrap();
    let back = io::read_survey(&sp, &world.frame).unwrap();
    assert_eq!(back.clusters.len(), survey.clusters.len());
    for (a, b) in back.clusters.iter().zip(&survey.clusters) {
        assert_eq!((a.county, a.stratum, a.urban, a.y_c, a.n_c), (b.county, b.stratum, b.urban, b.y_c, b.n_c));
        assert!((a.child_weight - b.child_weight).abs() <= 1e-12 * b.child_weight);
    }

    let est = direct_estimate(&survey, DirectOptions::default());
    let key = EstimateKey { scenario: "SUC".into(), design: "Stratified".into(), model: "direct".into(), replicate: 2 };
    let ep = dir.path().join("estimates.csv");
    io::write_estimates(&ep, &[(key.clone(), est.clone())]).unwrap();
    let back = io::read_estimates(&ep).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].0, key);
    for (a, b) in back[0].1.counties.iter().zip(&est.counties) {
        assert_eq!(a.flags, b.flags);
        for (x, y) in [(a.estimate, b.estimate), (a.var, b.var), (a.lower80, b.lower80), (a.upper80, b.upper80)] {
            assert!((x.is_nan() && y.is_nan()) || (x - y).abs() <= 1e-15 * y.abs().max(1.0));
        }
    }

    let tp = dir.path().join("truth.csv");
    io::write_truth(&tp, &pop.truth).unwrap();
    assert_eq!(io::read_truth(&tp).unwrap(), pop.truth.county);

    let mp = dir.path().join("meta.csv");
    io::write_stratum_meta(&mp, &world.meta_supplied).unwrap();
    assert_eq!(io::read_stratum_meta(&mp, 4).unwrap(), world.meta_supplied);
}

#[test]
fn county_draws_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("draws.csv");
    let draws = vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]];
    io::write_county_draws(&p, "BYM2_UCa", 3, &draws).unwrap();
    let back = io::read_county_draws(&p).unwrap();
    assert_eq!(back[&("BYM2_UCa".to_string(), 3)], draws);
}

#[test]
fn score_and_param_tables_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("scores.csv");
    let rows = vec![score("naive", -5e-3), score("BYM2_UCa", 4e-4)];
    io::write_scores(&p, &rows).unwrap();
    let back = io::read_scores(&p).unwrap();
    assert_eq!(back, rows.iter().map(ScoreCsvRow::from_score).collect::<Vec<_>>());
    assert!((back[0].bias_e4 + 50.0).abs() < 1e-9);

    let pp = dir.path().join("params.csv");
    let summary = ParamSummary::from_values("Urban", &[-1.1, -1.0, -0.9]);
    io::write_params(&pp, &[("BYM2_UC".into(), summary.clone(), 3)]).unwrap();
    let back = io::read_params(&pp).unwrap();
    assert_eq!((back[0].parameter.as_str(), back[0].replicates), ("Urban", 3));
    assert!((back[0].est - summary.mean).abs() < 1e-15);
}

#[test]
fn plot_rows_are_long_format() {
    let table = vec![ScoreCsvRow::from_score(&score("naive", 1e-3)), ScoreCsvRow::from_score(&score("direct", 0.0))];
    let rows = plot_rows(&[("SUC".into(), "Stratified".into(), table)]);
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[0].metric, "bias_e4");
    assert!((rows[0].value - 10.0).abs() < 1e-9);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("plot.csv");
    io::write_plot_rows(&p, &rows).unwrap();
    assert_eq!(io::read_plot_rows(&p).unwrap(), rows);

    let empty = dir.path().join("empty.csv");
    io::write_plot_rows(&empty, &[]).unwrap();
    assert_eq!(std::fs::read_to_string(&empty).unwrap().trim(), "scenario,design,model,metric,value");
}

#[test]
fn emitted_plot_data_joins_back_to_scores() {
    let dir = tempfile::tempdir().unwrap();
    let sp = dir.path().join("scores.csv");
    io::write_scores(&sp, &[score("naive", -1.234567e-3), score("SPDE_UC", 7.5e-5)]).unwrap();
    let out = dir.path().join("plot.csv");
    let n = saelab::harness::emit_plot_data(&[("SUC".into(), "Stratified".into(), sp.clone())], &out).unwrap();
    assert_eq!(n, 12);
    let source = io::read_scores(&sp).unwrap();
    for row in io::read_plot_rows(&out).unwrap() {
        let s = source.iter().find(|s| s.model == row.model).unwrap();
        let k = ScoreCsvRow::METRICS.iter().position(|m| *m == row.metric).unwrap();
        assert_eq!(row.value.to_bits(), s.metrics()[k].to_bits());
    }
}
