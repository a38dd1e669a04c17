//! Acceptance suite: prints one PASS/FAIL line per criterion and exits with
//! a failure status if any criterion fails.

use std::time::{Duration, Instant};

use saelab::harness::{run_experiment, ExperimentReport};
use saelab::pipeline::FitSettings;
use saelab::world::World;
use saelab::ExperimentConfig;
use saelab_core::aggregate::{adjust_density, bym2_county_mixture, ea_average, mix_urban_rural, Bym2Effects, CountyDraws};
use saelab_core::geodata::{county_adjacency, DensityGrid};
use saelab_core::gmrf::{matern_params, sample_gmrf, spde_precision, Mesh, SpdeOperator};
use saelab_core::inference::{fit_lgm, mcmc_oracle, sample_posterior, McmcConfig};
use saelab_core::math::{integrate, mean, sample_variance};
use saelab_core::models::{build_bym2, VariantFlags};
use saelab_core::popgen::Scenario;
use saelab_core::rng::rng_for;
use saelab_core::scoring::{crps_discrete, crps_draws};
use saelab_core::survey::{draw_survey, inclusion_probabilities, midzuno_sample, DesignKind, SelectionMode};

use rand::Rng;

type Outcome = Result<String, String>;

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, n: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let res = f();
        let t = start.elapsed();
        let (ok, detail) = match res {
            Ok(d) if t <= limit => (true, d),
            Ok(d) => (false, format!("{d}; runtime {:.1}s exceeds {:.0}s", t.as_secs_f64(), limit.as_secs_f64())),
            Err(d) => (false, d),
        };
        if !ok {
            self.failures += 1;
        }
        println!(
            "{} criterion {n:>2} ({name}): {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            t.as_secs_f64()
        );
    }
}

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn sampling() -> Outcome {
    let sizes: [u32; 10] = [30, 45, 60, 80, 100, 120, 150, 180, 220, 260];
    let n = 3;
    let pi = inclusion_probabilities(&sizes, n, SelectionMode::Pps, 25).map_err(|e| e.to_string())?.first_stage;
    let reps = 100_000;
    let mut hits = [0usize; 10];
    let mut rng = rng_for(11, &[1]);
    for _ in 0..reps {
        for i in midzuno_sample(&sizes, n, &mut rng).map_err(|e| e.to_string())? {
            hits[i] += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let p_hat = hits[i] as f64 / reps as f64;
        let se = (pi[i] * (1.0 - pi[i]) / reps as f64).sqrt();
        worst = worst.max((p_hat - pi[i]).abs() / se);
    }
    check(worst <= 3.0, format!("largest deviation {worst:.2} binomial SEs over {reps} samples"))
}

fn priors(world: &World) -> Outcome {
    let p = world.priors.as_ref().ok_or("no priors")?;
    let mut worst_sd: f64 = 0.0;
    for prior in [p.bym2_sd, p.cluster_sd] {
        let below = integrate(|s| prior.density(s), 0.0, 1.0, 64);
        worst_sd = worst_sd.max((1.0 - below - 0.01).abs());
    }
    let phi = (p.phi.cdf_quadrature(0.5) - 2.0 / 3.0).abs();
    let d = world.grid.diameter();
    let median = (p.matern.range_quantile(0.5) - d / 5.0).abs();
    check(
        worst_sd <= 1e-10 && phi <= 1e-6 && median <= 1e-9,
        format!("P(sigma>1) error {worst_sd:.1e}, phi CDF error {phi:.1e}, range median error {median:.1e}"),
    )
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
fn dense_inverse(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
        a.swap(c, p);
        inv.swap(c, p);
        let d = a[c][c];
        for j in 0..n {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                for j in 0..n {
                    a[r][j] -= f * a[c][j];
                    inv[r][j] -= f * inv[c][j];
                }
            }
        }
    }
    inv
}

fn gmrf(world: &World) -> Outcome {
    let (rho, sigma) = (0.15, 0.15);
    let op = SpdeOperator::new(Mesh::regular((0.0, 0.0, 1.0, 1.0), 0.3, 0.02).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let (kappa, tau) = matern_params(rho, sigma).map_err(|e| e.to_string())?;
    let q = spde_precision(&op, kappa, tau).map_err(|e| e.to_string())?;
    let draws = sample_gmrf(&q, 2000, 5).map_err(|e| e.to_string())?;
    let mut pts = Vec::new();
    for i in 0..9 {
        for j in 0..9 {
            let (x, y) = (0.2 + 0.06 * i as f64, 0.2 + 0.06 * j as f64);
            pts.push((x, y));
            pts.push((x + rho, y));
        }
    }
    let a = op.mesh.projector(&pts).map_err(|e| e.to_string())?;
    let (mut cov, mut var) = (0.0, 0.0);
    for d in &draws {
        let v = a.mul_vec(d);
        for k in (0..v.len()).step_by(2) {
            cov += v[k] * v[k + 1];
            var += 0.5 * (v[k] * v[k] + v[k + 1] * v[k + 1]);
        }
    }
    let corr = cov / var;
    let sd = (var / (draws.len() * pts.len() / 2) as f64).sqrt();

    let icar = world.icar.as_ref().ok_or("no ICAR")?;
    let graph = county_adjacency(&world.grid).map_err(|e| e.to_string())?;
    let m = graph.m;
    let nb = graph.neighbors();
    let shifted: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let r = if i == j { nb[i].len() as f64 } else if nb[i].contains(&j) { -1.0 } else { 0.0 };
                    icar.scale * r + 1.0 / m as f64
                })
                .collect()
        })
        .collect();
    let inv = dense_inverse(shifted);
    let geo = ((0..m).map(|i| (inv[i][i] - 1.0 / m as f64).ln()).sum::<f64>() / m as f64).exp();
    check(
        (0.05..=0.15).contains(&corr) && (sd - sigma).abs() <= 0.15 * sigma && (geo - 1.0).abs() <= 1e-6,
        format!("lag-range correlation {corr:.4}, SD {sd:.4} (target {sigma}), ICAR geometric-mean variance {geo:.9}"),
    )
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 77;
    let g = &mut cfg.geometry;
    g.county_rows = 3;
    g.county_cols = 4;
    g.nrows = 24;
    g.ncols = 32;
    g.cell_size = 1.0 / 32.0;
    g.urban_targets = vec![1.0, 0.6, 0.45, 0.35, 0.3, 0.25, 0.2, 0.15, 0.12, 0.1, 0.08, 0.05];
    g.eas_per_county = 100;
    cfg.survey.clusters_per_county = 5;
    cfg
}

fn inference() -> Outcome {
    let cfg = small_config();
    let world = World::build(&cfg).map_err(|e| e.to_string())?;
    let pop = world.population(&cfg, Scenario::ALL[3]).map_err(|e| e.to_string())?;
    let survey = draw_survey(&world.frame, &pop.ledger, &world.design(&cfg, DesignKind::Stratified), 3)
        .map_err(|e| e.to_string())?;
    let flags = VariantFlags { urban: true, cluster: true };
    let (icar, priors) = world.model_inputs().map_err(|e| e.to_string())?;
    let spec = build_bym2(&survey, icar, flags, priors).map_err(|e| e.to_string())?;
    let settings = FitSettings::from_config(&cfg).map_err(|e| e.to_string())?;
    let fit = fit_lgm(&spec, &settings.grid).map_err(|e| e.to_string())?;
    let laplace = sample_posterior(&fit, &spec, 8000, 1).map_err(|e| e.to_string())?;
    let mcmc = mcmc_oracle(&spec, &McmcConfig::default(), 2).map_err(|e| format!("oracle: {e}"))?;
    let county = |d| -> Result<CountyDraws, String> {
        let eff = Bym2Effects::from_draws(&spec, d).map_err(|e| e.to_string())?;
        bym2_county_mixture(&eff, &world.meta_true.rural_fraction(), &world.meta_true.eas, 9).map_err(|e| e.to_string())
    };
    let (a, b) = (county(&laplace)?, county(&mcmc.draws)?);
    let (mut dmean, mut dsd): (f64, f64) = (0.0, 0.0);
    for i in 0..a.n_counties() {
        dmean = dmean.max((mean(&a.draws[i]) - mean(&b.draws[i])).abs());
        let (sa, sb) = (sample_variance(&a.draws[i]).sqrt(), sample_variance(&b.draws[i]).sqrt());
        dsd = dsd.max((sa - sb).abs() / sb);
    }
    check(
        spec.n_obs() == 60 && a.n_counties() == 12 && dmean <= 0.015 && dsd <= 0.25,
        format!(
            "{} clusters, max |mean diff| {dmean:.4}, max relative SD diff {:.1}%, oracle max R-hat {:.3}",
            spec.n_obs(),
            100.0 * dsd,
            mcmc.max_rhat
        ),
    )
}

fn crps() -> Outcome {
    // Exhaustive propriety spot-check over binomial truths and a grid of
    // alternative CDFs.
    let mut violations = 0;
    let mut checked = 0;
    for n in 1..=3usize {
        let binom = |t: f64| -> Vec<f64> {
            let mut pmf: Vec<f64> = (0..=n)
                .map(|k| {
                    let c = (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64);
                    c * t.powi(k as i32) * (1.0 - t).powi((n - k) as i32)
                })
                .collect();
            let s: f64 = pmf.iter().sum();
            pmf.iter_mut().for_each(|p| *p /= s);
            pmf
        };
        let cdf = |pmf: &[f64]| -> Vec<f64> {
            let mut acc = 0.0;
            let mut c: Vec<f64> = pmf.iter().map(|p| {
                acc += p;
                acc
            }).collect();
            *c.last_mut().unwrap() = 1.0;
            c
        };
        let thetas: Vec<f64> = (1..20).map(|k| k as f64 / 20.0).collect();
        for &t in &thetas {
            let truth = binom(t);
            let f_true = cdf(&truth);
            let expected = |f: &[f64]| -> f64 {
                (0..=n).map(|y| truth[y] * crps_discrete(f, y, n).unwrap()).sum()
            };
            let base = expected(&f_true);
            for &t2 in &thetas {
                let mut alts = vec![cdf(&binom(t2))];
                for k in 0..n {
                    let mut f = f_true.clone();
                    f[k] = (f[k] + t2 * (1.0 - f[k])).min(1.0);
                    for j in k + 1..=n {
                        f[j] = f[j].max(f[k]);
                    }
                    alts.push(f);
                }
                for alt in alts {
                    checked += 1;
                    if expected(&alt) < base - 1e-14 {
                        violations += 1;
                    }
                }
            }
        }
    }
    // Draw-based estimator against the exact discrete sum: for proportions
    // on k/n the continuous score equals the discrete sum divided by n.
    let (n, pmf) = (3usize, [0.2, 0.3, 0.4, 0.1]);
    let f: Vec<f64> = pmf.iter().scan(0.0, |a, p| {
        *a += p;
        Some(*a)
    }).collect();
    let mut worst: f64 = 0.0;
    let mut rng = rng_for(5, &[2]);
    for y in 0..=n {
        let exact = crps_discrete(&f, y, n).unwrap() / n as f64;
        let (reps, m) = (100, 10_000);
        let est: Vec<f64> = (0..reps)
            .map(|_| {
                let d: Vec<f64> = (0..m)
                    .map(|_| {
                        let u: f64 = rng.random();
                        f.iter().position(|&c| u < c).unwrap_or(n) as f64 / n as f64
                    })
                    .collect();
                crps_draws(&d, y as f64 / n as f64).unwrap()
            })
            .collect();
        let se = (sample_variance(&est) / reps as f64).sqrt();
        worst = worst.max((mean(&est) - exact).abs() / se);
    }
    check(
        violations == 0 && worst <= 3.0,
        format!("{violations} propriety violations in {checked} comparisons; draw estimator within {worst:.2} MC SEs"),
    )
}

fn headline(report: &ExperimentReport) -> (Outcome, Outcome, Outcome) {
    let cell = match report.cell(Scenario::ALL[3], DesignKind::Stratified) {
        Some(c) => c,
        None => {
            let e = Err("Pop_SUC/Stratified missing from report".to_string());
            return (e.clone(), e.clone(), e);
        }
    };
    let bias = |m: &str| cell.score(m).map(|r| r.bias);
    let cvg = |m: &str| cell.score(m).map(|r| r.coverage80);
    let c6 = match (bias("naive"), bias("BYM2_uc"), bias("BYM2_UC"), bias("direct")) {
        (Some(n), Some(u), Some(a), Some(d)) => {
            let small = a.abs().max(d.abs());
            check(
                n < 0.0 && u < 0.0 && n.abs() >= 3.0 * small && u.abs() >= 3.0 * small,
                format!(
                    "bias e4: naive {:.1}, BYM2_uc {:.1}, BYM2_UCa {:.1}, direct {:.1}",
                    n * 1e4,
                    u * 1e4,
                    a * 1e4,
                    d * 1e4
                ),
            )
        }
        _ => Err("score rows missing".into()),
    };
    let c7 = match (cvg("BYM2_uc"), cvg("BYM2_UC")) {
        (Some(u), Some(a)) => check(
            u <= 0.70 && (0.70..=0.90).contains(&a),
            format!("80% coverage: BYM2_uc {:.1}%, BYM2_UCa {:.1}%", 100.0 * u, 100.0 * a),
        ),
        _ => Err("score rows missing".into()),
    };
    let urb = |m: &str| cell.param(m, "Urban").map(|p| p.mean);
    let c9 = match (urb("BYM2_UC"), urb("SPDE_UC")) {
        (Some(b), Some(s)) => check(
            (b + 1.0).abs() <= 0.15 && (s + 1.0).abs() <= 0.15,
            format!("posterior mean urban effect: BYM2_UC {b:.3}, SPDE_UC {s:.3}"),
        ),
        _ => Err("parameter rows missing".into()),
    };
    (c6, c7, c9)
}

fn unbiased_design() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.scenarios = vec!["suc".into()];
    cfg.designs = vec!["Unstratified".into()];
    cfg.models = vec!["naive".into(), "direct".into()];
    let report = run_experiment(&cfg, None).map_err(|e| e.to_string())?;
    let cell = &report.cells[0];
    let mut parts = Vec::new();
    let mut ok = true;
    for model in ["naive", "direct"] {
        let reps: Vec<f64> = cell
            .estimates
            .iter()
            .filter(|(k, _)| k.model == model)
            .map(|(_, e)| {
                let errs: Vec<f64> =
                    e.counties.iter().zip(&cell.truth).map(|(c, t)| c.estimate - t).collect();
                mean(&errs)
            })
            .collect();
        let bias = mean(&reps);
        let se = (sample_variance(&reps) / reps.len() as f64).sqrt();
        ok &= bias.abs() <= 4.0 * se;
        parts.push(format!("{model} bias {:.2}e-4 ({:.2} SEs)", bias * 1e4, bias.abs() / se));
    }
    check(ok, parts.join(", "))
}

fn aggregation(world: &World) -> Outcome {
    let m = world.n_counties();
    let mut rng = rng_for(3, &[4]);
    let n_draws = 200;
    let eff = Bym2Effects {
        beta0: (0..n_draws).map(|_| -1.75 + 0.1 * rng.random::<f64>()).collect(),
        beta_urban: Some((0..n_draws).map(|_| -1.0 + 0.2 * rng.random::<f64>()).collect()),
        county: (0..n_draws).map(|_| (0..m).map(|_| 0.3 * (rng.random::<f64>() - 0.5)).collect()).collect(),
        cluster_sd: None,
    };
    let meta = &world.meta_true;
    let mixed = bym2_county_mixture(&eff, &meta.rural_fraction(), &meta.eas, 1).map_err(|e| e.to_string())?;
    let expit = saelab_core::math::expit;
    let mut worst: f64 = 0.0;
    for i in 0..m {
        let stratum = |urban: bool, n_s: usize| -> Vec<Vec<f64>> {
            (0..n_draws)
                .map(|j| {
                    let bu = if urban { eff.beta_urban.as_ref().unwrap()[j] } else { 0.0 };
                    vec![expit(eff.beta0[j] + bu + eff.county[j][i]); n_s.max(1)]
                })
                .collect()
        };
        let pu = ea_average(&stratum(true, meta.eas[i][0]), meta.eas[i][0].max(1)).map_err(|e| e.to_string())?;
        let pr = ea_average(&stratum(false, meta.eas[i][1]), meta.eas[i][1].max(1)).map_err(|e| e.to_string())?;
        let via = mix_urban_rural(&pu, &pr, meta.urban_fraction[i]).map_err(|e| e.to_string())?;
        for j in 0..n_draws {
            worst = worst.max((via[j] - mixed.draws[i][j]).abs());
        }
    }
    let adj = adjust_density(&world.grid, &world.mask, meta).map_err(|e| e.to_string())?;
    let mut mass = vec![[0.0f64; 2]; m];
    for k in 0..adj.len() {
        mass[world.grid.county_id[k]][if world.mask.urban[k] { 0 } else { 1 }] += adj[k];
    }
    let mut target_err: f64 = 0.0;
    for c in 0..m {
        let t = meta.target(c);
        for s in 0..2 {
            target_err = target_err.max((mass[c][s] - t[s]).abs() / t[s].max(1.0));
        }
    }
    let regridded = DensityGrid { values: adj.clone(), ..world.grid.clone() };
    let again = adjust_density(&regridded, &world.mask, meta).map_err(|e| e.to_string())?;
    let idem = adj.iter().zip(&again).map(|(a, b)| (a - b).abs() / a.abs().max(1.0)).fold(0.0, f64::max);
    check(
        worst <= 1e-12 && target_err <= 1e-12 && idem <= 1e-12,
        format!("mixture identity {worst:.1e}, stratum target error {target_err:.1e}, idempotence {idem:.1e}"),
    )
}

fn main() {
    let mut suite = Suite { failures: 0 };
    let cfg = ExperimentConfig::preset("mini-kenya").expect("preset");
    let world = World::build(&cfg).expect("preset world");
    let s = Duration::from_secs;
    suite.run(1, "sampling correctness", s(10), sampling);
    suite.run(2, "prior calibration", s(5), || priors(&world));
    suite.run(3, "GMRF fidelity", s(60), || gmrf(&world));
    suite.run(4, "inference fidelity", s(600), inference);
    suite.run(5, "CRPS propriety and equivalence", s(30), crps);
    let start = Instant::now();
    let report = run_experiment(&cfg, None);
    let run_time = start.elapsed();
    let (c6, c7, c9) = match &report {
        Ok(r) => headline(r),
        Err(e) => {
            let e = Err(format!("mini-kenya run failed: {e}"));
            (e.clone(), e.clone(), e)
        }
    };
    let limit = s(1800).saturating_sub(run_time);
    suite.run(6, "directional bias", limit, || c6.map(|d| format!("{d}; run {:.0}s", run_time.as_secs_f64())));
    suite.run(7, "coverage", limit, || c7);
    suite.run(8, "unbiased-design sanity", s(600), unbiased_design);
    suite.run(9, "parameter recovery", limit, || c9);
    suite.run(10, "aggregation identities", s(5), || aggregation(&world));
    println!("{} of 10 criteria passed", 10 - suite.failures);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
