mod common;

use std::collections::BTreeSet;

use common::{fixture, stratified};
use saelab_core::aggregate::smoothed_direct_draws;
use saelab_core::design::LogitInput;
use saelab_core::inference::{fit_lgm, sample_posterior, GridConfig, ModelSpec};
use saelab_core::math::expit;
use saelab_core::models::{build_bym2, build_smoothed_direct, build_spde, parameter_summaries, VariantFlags, CLUSTER, FIXED};
use saelab_core::popgen::Scenario;
use saelab_core::survey::draw_survey;

fn flags(urban: bool, cluster: bool) -> VariantFlags {
    VariantFlags { urban, cluster }
}

fn parameter_set(spec: &ModelSpec) -> BTreeSet<String> {
    let mut s: BTreeSet<String> = spec.hyper_names().into_iter().collect();
    for label in ["intercept", "urban"] {
        if spec.fixed_index(label).is_some() {
            s.insert(label.to_string());
        }
    }
    s
}

#[test]
fn variant_structure() {
    let f = fixture(1, Scenario::ALL[3]);
    let survey = draw_survey(&f.frame, &f.ledger, &stratified(3), 2).unwrap();
    let n_obs = survey.clusters.len();
    let m = f.icar.m;
    let n_nodes = f.spde.op.n_nodes();
    let mut sets = Vec::new();
    for v in VariantFlags::ALL {
        let b = build_bym2(&survey, &f.icar, v, &f.priors).unwrap();
        let s = build_spde(&survey, &f.spde, v, &f.priors).unwrap();
        let p = 1 + v.urban as usize;
        for (spec, field) in [(&b, 2 * m), (&s, n_nodes)] {
            assert_eq!(spec.n_hyper(), 2 + v.cluster as usize);
            assert_eq!(spec.n_obs(), n_obs);
            assert_eq!(spec.block(CLUSTER).is_some(), v.cluster);
            assert_eq!(spec.n_latent(), p + field + if v.cluster { n_obs } else { 0 });
        }
        // Fixed-effect design columns agree bit for bit.
        let cols = b.block(FIXED).unwrap().range();
        assert_eq!(cols, s.block(FIXED).unwrap().range());
        for c in cols {
            let bc: Vec<(usize, u64)> = b.projector.column(c).map(|(r, x)| (r, x.to_bits())).collect();
            let sc: Vec<(usize, u64)> = s.projector.column(c).map(|(r, x)| (r, x.to_bits())).collect();
            assert_eq!(bc, sc);
        }
        sets.push((v, parameter_set(&b)));
    }
    let get = |u, c| sets.iter().find(|(v, _)| *v == flags(u, c)).unwrap().1.clone();
    let (uc, uc_c, u_c, full) = (get(false, false), get(false, true), get(true, false), get(true, true));
    assert!(uc.is_subset(&uc_c) && uc.len() < uc_c.len());
    assert!(uc.is_subset(&u_c) && uc.len() < u_c.len());
    assert!(uc_c.is_subset(&full) && u_c.is_subset(&full));
}

#[test]
fn projector_rows_at_mesh_nodes_are_unit_vectors() {
    let f = fixture(2, Scenario::ALL[0]);
    let mesh = f.spde.mesh();
    let a = mesh.projector(&mesh.nodes).unwrap().transpose();
    for r in 0..mesh.nodes.len() {
        let row: Vec<(usize, f64)> = a.column(r).filter(|(_, w)| *w != 0.0).collect();
        assert_eq!(row.len(), 1, "node {r}: {row:?} at {:?}", mesh.nodes[r]);
        assert_eq!(row[0].0, r);
        assert!((row[0].1 - 1.0).abs() < 1e-12);
    }
}

#[test]
fn location_outside_mesh_is_rejected() {
    let f = fixture(3, Scenario::ALL[0]);
    let mut survey = draw_survey(&f.frame, &f.ledger, &stratified(2), 1).unwrap();
    survey.clusters[0].x = 50.0;
    assert!(build_spde(&survey, &f.spde, flags(true, false), &f.priors).is_err());
}

#[test]
fn smoothed_direct_needs_two_counties() {
    let f = fixture(4, Scenario::ALL[0]);
    let input = LogitInput { z: vec![-1.0; 4], v: vec![0.1; 4], available: vec![true, false, false, false] };
    assert!(build_smoothed_direct(&input, &f.icar, &f.priors).is_err());
}

#[test]
fn zero_variance_direct_estimate_pins_the_county() {
    let f = fixture(5, Scenario::ALL[0]);
    let input = LogitInput { z: vec![-1.2, -1.5, -2.0, -1.7], v: vec![0.0, 0.05, 0.05, 0.05], available: vec![true; 4] };
    let spec = build_smoothed_direct(&input, &f.icar, &f.priors).unwrap();
    let fit = fit_lgm(&spec, &GridConfig::default()).unwrap();
    let draws = sample_posterior(&fit, &spec, 500, 1).unwrap();
    let county = smoothed_direct_draws(&spec, &draws).unwrap();
    for p in &county.draws[0] {
        assert!((p - expit(-1.2)).abs() < 1e-8, "{p}");
    }
    let sd1 = {
        let d = &county.draws[1];
        let mu = d.iter().sum::<f64>() / d.len() as f64;
        (d.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
    };
    assert!(sd1 > 1e-3);
}

#[test]
fn vacuous_direct_estimates_leave_counties_exchangeable() {
    let f = fixture(6, Scenario::ALL[0]);
    let input = LogitInput { z: vec![-1.0, 0.5, -2.0, 1.0], v: vec![f64::INFINITY; 4], available: vec![true; 4] };
    let spec = build_smoothed_direct(&input, &f.icar, &f.priors).unwrap();
    let fit = fit_lgm(&spec, &GridConfig::default()).unwrap();
    let draws = sample_posterior(&fit, &spec, 4000, 2).unwrap();
    let county = smoothed_direct_draws(&spec, &draws).unwrap();
    let means: Vec<f64> = county.draws.iter().map(|d| d.iter().sum::<f64>() / d.len() as f64).collect();
    // Differences between counties only carry the (small) spread of the
    // county effects relative to the shared intercept.
    for i in 1..4 {
        let diff: Vec<f64> = county.draws[i].iter().zip(&county.draws[0]).map(|(a, b)| a - b).collect();
        let mu = diff.iter().sum::<f64>() / diff.len() as f64;
        let se = (diff.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (diff.len() as f64).powi(2)).sqrt();
        assert!((means[i] - means[0]).abs() <= 4.0 * se + 1e-12, "county {i}: {means:?}");
    }
}

#[test]
fn bym2_summaries_report_interpretable_parameters() {
    let f = fixture(7, Scenario::ALL[3]);
    let survey = draw_survey(&f.frame, &f.ledger, &stratified(4), 3).unwrap();
    let spec = build_bym2(&survey, &f.icar, flags(true, true), &f.priors).unwrap();
    let fit = fit_lgm(&spec, &GridConfig::default()).unwrap();
    let draws = sample_posterior(&fit, &spec, 400, 3).unwrap();
    let names: Vec<String> = parameter_summaries(&spec, &draws).into_iter().map(|p| p.name).collect();
    for n in ["Intercept", "Urban", "Phi", "Tot. Var", "Spatial SD", "Cluster Var"] {
        assert!(names.iter().any(|x| x == n), "{n} missing from {names:?}");
    }
    let urban = parameter_summaries(&spec, &draws).into_iter().find(|p| p.name == "Urban").unwrap();
    assert!(urban.q10 <= urban.q50 && urban.q50 <= urban.q90);
}
