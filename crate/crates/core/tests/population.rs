mod common;

use common::fixture;
use saelab_core::geodata::{county_adjacency, AdjacencyGraph, DensityGrid};
use saelab_core::gmrf::icar_scaled;
use saelab_core::math::logit;
use saelab_core::popgen::Scenario;

#[test]
fn adjacency_depends_only_on_county_ids() {
    let f = fixture(1, Scenario::ALL[0]);
    let flat = DensityGrid { values: vec![1.0; f.grid.n_cells()], ..f.grid.clone() };
    assert_eq!(county_adjacency(&f.grid).unwrap(), county_adjacency(&flat).unwrap());
}

#[test]
fn icar_scaling_is_relabeling_invariant() {
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (1, 3), (4, 5)];
    let perm = [3, 5, 0, 1, 4, 2];
    let relabeled: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
    let a = icar_scaled(&AdjacencyGraph::from_edges(6, &edges).unwrap()).unwrap();
    let b = icar_scaled(&AdjacencyGraph::from_edges(6, &relabeled).unwrap()).unwrap();
    assert!((a.scale - b.scale).abs() < 1e-12 * a.scale);
    for i in 0..6 {
        assert!((a.marginal_variances[i] - b.marginal_variances[perm[i]]).abs() < 1e-10);
    }
    let geo = (a.marginal_variances.iter().map(|v| v.ln()).sum::<f64>() / 6.0).exp();
    assert!((geo - 1.0).abs() < 1e-6);
}

#[test]
fn frame_respects_configuration() {
    let f = fixture(2, Scenario::ALL[0]);
    assert_eq!(f.frame.stratum_counts(), vec![[20, 20]; 4]);
    for ea in &f.frame.eas {
        assert!(ea.households >= 25);
        assert_eq!(f.mask.urban[ea.cell], ea.urban);
        assert_eq!(f.grid.county_id[ea.cell], ea.county);
    }
}

#[test]
fn county_truth_is_child_weighted_stratum_mixture() {
    let f = fixture(3, Scenario::ALL[3]);
    for c in 0..4 {
        let (nu, nr) = (f.truth.stratum_children[2 * c] as f64, f.truth.stratum_children[2 * c + 1] as f64);
        let mix = (nu * f.truth.stratum[2 * c] + nr * f.truth.stratum[2 * c + 1]) / (nu + nr);
        assert!((mix - f.truth.county[c]).abs() < 1e-12);
    }
}

#[test]
fn risk_decomposes_on_the_logit_scale() {
    use saelab_core::popgen::{simulate_risk, ScenarioParams};
    let f = fixture(4, Scenario::ALL[0]);
    for sc in Scenario::ALL {
        let params = ScenarioParams {
            scenario: sc,
            beta0: -1.75,
            beta_urban: -1.0,
            sigma_spatial: 0.15,
            range: 0.2,
            sigma_cluster: 0.1,
        };
        let risk = simulate_risk(&f.frame, &params, &f.spde.op, 9).unwrap();
        for (k, ea) in f.frame.eas.iter().enumerate() {
            let eta = -1.75
                + if sc.spatial { risk.spatial[k] } else { 0.0 }
                + if sc.urban && ea.urban { -1.0 } else { 0.0 }
                + if sc.cluster { risk.cluster[k] } else { 0.0 };
            assert!((risk.eta[k] - eta).abs() < 1e-12);
            assert!((logit(risk.p[k]) - eta).abs() < 1e-9);
        }
        if !sc.spatial {
            assert!(risk.spatial.iter().all(|&u| u == 0.0));
        }
    }
}
