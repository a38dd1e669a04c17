mod common;

use common::fixture;
use proptest::prelude::*;
use saelab_core::aggregate::{
    adjust_density, bym2_county_mixture, ea_average, integrate_surface, mix_urban_rural, Bym2Effects, StratumMeta,
};
use saelab_core::geodata::{DensityGrid, UrbanMask};
use saelab_core::math::expit;
use saelab_core::popgen::Scenario;
use saelab_core::rng::rng_for;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn effects(n_draws: usize, m: usize, beta_urban: Option<f64>, cluster_sd: Option<f64>, seed: u64) -> Bym2Effects {
    let mut rng = rng_for(seed, &[0]);
    Bym2Effects {
        beta0: (0..n_draws).map(|_| -1.75 + 0.2 * rng.random::<f64>()).collect(),
        beta_urban: beta_urban.map(|b| vec![b; n_draws]),
        county: (0..n_draws).map(|_| (0..m).map(|_| rng.random::<f64>() - 0.5).collect()).collect(),
        cluster_sd: cluster_sd.map(|s| vec![s; n_draws]),
    }
}

#[test]
fn mixture_without_nugget_equals_stratum_composition() {
    let m = 5;
    let eff = effects(300, m, Some(-1.0), None, 1);
    let q = [0.0, 0.25, 0.5, 0.9, 1.0];
    let counts = vec![[3, 7]; m];
    let mixed = bym2_county_mixture(&eff, &q, &counts, 2).unwrap();
    for i in 0..m {
        let stratum = |bu: f64, n_s: usize| -> Vec<Vec<f64>> {
            (0..300).map(|j| vec![expit(eff.beta0[j] + bu + eff.county[j][i]); n_s]).collect()
        };
        let pu = ea_average(&stratum(-1.0, 3), 3).unwrap();
        let pr = ea_average(&stratum(0.0, 7), 7).unwrap();
        let via = mix_urban_rural(&pu, &pr, 1.0 - q[i]).unwrap();
        for j in 0..300 {
            assert!((via[j] - mixed.draws[i][j]).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_urban_effect_ignores_rural_fraction() {
    let eff = effects(50, 3, Some(0.0), None, 3);
    let a = bym2_county_mixture(&eff, &[0.1, 0.5, 0.9], &[[4, 4]; 3], 1).unwrap();
    let b = bym2_county_mixture(&eff, &[0.9, 0.0, 1.0], &[[4, 4]; 3], 1).unwrap();
    for i in 0..3 {
        for j in 0..50 {
            assert!((a.draws[i][j] - b.draws[i][j]).abs() < 1e-15);
            assert!((a.draws[i][j] - expit(eff.beta0[j] + eff.county[j][i])).abs() < 1e-15);
        }
    }
}

#[test]
fn rural_fraction_outside_unit_interval_is_rejected() {
    let eff = effects(5, 2, None, None, 4);
    assert!(bym2_county_mixture(&eff, &[0.5, 1.2], &[[1, 1]; 2], 0).is_err());
}

#[test]
fn nugget_average_shrinks_with_ea_count() {
    // Var of an n_S-EA average of iid cluster effects is var/n_S.
    let mut rng = rng_for(7, &[1]);
    let sd = 0.5;
    for n_s in [1usize, 4, 16] {
        let draws: Vec<Vec<f64>> =
            (0..10_000).map(|_| (0..n_s).map(|_| sd * normal(&mut rng)).collect()).collect();
        let avg = ea_average(&draws, n_s).unwrap();
        let mean = avg.iter().sum::<f64>() / avg.len() as f64;
        let var = avg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (avg.len() - 1) as f64;
        let target = sd * sd / n_s as f64;
        assert!((var / target - 1.0).abs() < 0.05, "n_S {n_s}: {var} vs {target}");
    }
    assert!(ea_average(&[vec![0.1, 0.2]], 3).is_err());
}

#[test]
fn mixture_with_nugget_stays_between_strata() {
    let eff = effects(200, 4, Some(-1.0), Some(0.3), 5);
    let out = bym2_county_mixture(&eff, &[0.2, 0.4, 0.6, 0.8], &[[10, 30]; 4], 6).unwrap();
    for row in &out.draws {
        assert!(row.iter().all(|p| *p > 0.0 && *p < 1.0));
    }
    let again = bym2_county_mixture(&eff, &[0.2, 0.4, 0.6, 0.8], &[[10, 30]; 4], 6).unwrap();
    assert_eq!(out, again);
}

fn two_county_grid() -> (DensityGrid, UrbanMask) {
    // 2x4 cells; county 0 is the left half, its first row urban.
    let county: Vec<usize> = (0..8).map(|k| (k % 4 >= 2) as usize).collect();
    let grid = DensityGrid::new(2, 4, 1.0, (0.0, 0.0), vec![1.0; 8], county).unwrap();
    let urban: Vec<bool> = (0..8).map(|k| k < 4).collect();
    (grid, UrbanMask { urban, urban_fraction: vec![0.5, 0.5] })
}

#[test]
fn uniform_density_rescales_to_targets() {
    let (grid, mask) = two_county_grid();
    let meta = StratumMeta::from_counts(vec![[10, 4], [2, 6]], 50.0, 80.0).unwrap();
    let adj = adjust_density(&grid, &mask, &meta).unwrap();
    // County 0 urban cells 0,1 share 500; rural cells 4,5 share 320.
    assert!((adj[0] - 250.0).abs() < 1e-12 && (adj[1] - 250.0).abs() < 1e-12);
    assert!((adj[4] - 160.0).abs() < 1e-12 && (adj[5] - 160.0).abs() < 1e-12);
    let total0: f64 = (0..8).filter(|&k| grid.county_id[k] == 0).map(|k| adj[k]).sum();
    assert!((total0 - (10.0 * 50.0 + 4.0 * 80.0)).abs() < 1e-9);
}

#[test]
fn density_already_on_target_is_a_fixed_point() {
    let f = fixture(8, Scenario::ALL[0]);
    let meta = StratumMeta::from_frame(&f.frame);
    let once = adjust_density(&f.grid, &f.mask, &meta).unwrap();
    let grid2 = DensityGrid { values: once.clone(), ..f.grid.clone() };
    let twice = adjust_density(&grid2, &f.mask, &meta).unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
    for c in 0..4 {
        let t = meta.target(c);
        let total: f64 = (0..once.len()).filter(|&k| f.grid.county_id[k] == c).map(|k| once[k]).sum();
        assert!((total - t[0] - t[1]).abs() < 1e-9 * total);
    }
}

#[test]
fn empty_stratum_with_target_is_a_domain_error() {
    let (grid, _) = two_county_grid();
    let mask = UrbanMask { urban: vec![false; 8], urban_fraction: vec![0.0, 0.0] };
    let meta = StratumMeta::from_counts(vec![[1, 4], [0, 6]], 50.0, 80.0).unwrap();
    assert!(adjust_density(&grid, &mask, &meta).is_err());
}

#[test]
fn integration_examples() {
    let out = integrate_surface(&[vec![0.1, 0.3]], &[1.0, 3.0], &[0, 0], 1).unwrap();
    assert!((out.draws[0][0] - 0.25).abs() < 1e-15);
    let out = integrate_surface(&[vec![0.4, 0.4, 0.4]], &[1.0, 7.0, 2.0], &[0, 0, 0], 1).unwrap();
    assert!((out.draws[0][0] - 0.4).abs() < 1e-15);
    let out = integrate_surface(&[vec![0.1, 0.9]], &[0.0, 5.0], &[0, 0], 1).unwrap();
    assert!((out.draws[0][0] - 0.9).abs() < 1e-15);
    assert!(integrate_surface(&[vec![0.1]], &[0.0], &[0], 1).is_err());
}

#[test]
fn mixing_examples() {
    assert_eq!(mix_urban_rural(&[0.2], &[0.4], 0.0).unwrap(), vec![0.4]);
    assert_eq!(mix_urban_rural(&[0.2], &[0.4], 1.0).unwrap(), vec![0.2]);
    assert!((mix_urban_rural(&[0.2], &[0.4], 0.5).unwrap()[0] - 0.3).abs() < 1e-15);
    assert!(mix_urban_rural(&[0.2, 0.1], &[0.4], 0.5).is_err());
}

proptest! {
    #[test]
    fn integrated_draws_are_convex_combinations(
        p in prop::collection::vec(0.001f64..0.999, 1..20),
        w in prop::collection::vec(0.0f64..10.0, 20),
    ) {
        let n = p.len();
        let mut w = w[..n].to_vec();
        w[0] += 0.1;
        let out = integrate_surface(&[p.clone()], &w, &vec![0; n], 1).unwrap();
        let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.draws[0][0] >= lo - 1e-15 && out.draws[0][0] <= hi + 1e-15);
    }
}
