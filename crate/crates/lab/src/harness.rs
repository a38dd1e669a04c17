//! Experiment orchestration: scenarios x designs x replicates, scoring and
//! report files.
//!
//! Seeds follow a fixed counter scheme from the master seed `s`:
//! geometry and frame use `s` directly, the population of scenario `c` uses
//! `derive(s, [RISK, c])`, and replicate `r` of design `d` uses
//! `derive(s, [SURVEY, c, d, r])`, from which fit and aggregation streams are
//! derived by label. Replicates run in a thread pool; results are collected
//! in replicate order and written by the calling thread.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use saelab_core::design::CountyEstimates;
use saelab_core::models::{ModelKind, ParamSummary};
use saelab_core::popgen::{scenario_label, Scenario};
use saelab_core::scoring::{score_table, ReplicatePrediction, ScoreRow};
use saelab_core::survey::{draw_survey, DesignKind};

use crate::config::ExperimentConfig;
use crate::error::{io_err, LabError, Result};
use crate::io::{self, EstimateKey, PlotRow, ScoreCsvRow};
use crate::pipeline::{run_models, FitSettings, ModelOutput};
use crate::world::{replicate_seed, World};

/// A model that produced no prediction for a replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub replicate: usize,
    pub model: String,
    pub reason: String,
}

/// Results of one scenario and design.
#[derive(Debug, Clone)]
pub struct CellReport {
    pub scenario: Scenario,
    pub design: DesignKind,
    pub truth: Vec<f64>,
    pub scores: Vec<ScoreRow>,
    /// Parameter summaries averaged over replicates, with the replicate count.
    pub params: Vec<(String, ParamSummary, usize)>,
    pub estimates: Vec<(EstimateKey, CountyEstimates)>,
    pub failures: Vec<Failure>,
    /// Grid points whose inner optimization did not converge, summed over fits.
    pub nonconverged: usize,
    pub seeds: Vec<u64>,
    pub seconds: f64,
}

impl CellReport {
    pub fn label(&self) -> String {
        format!("{}_{}", scenario_label(self.scenario), self.design)
    }

    pub fn score(&self, model: &str) -> Option<&ScoreRow> {
        self.scores.iter().find(|r| r.model == model)
    }

    pub fn param(&self, model: &str, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|(m, p, _)| m == model && p.name == name).map(|(_, p, _)| p)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub cells: Vec<CellReport>,
    pub config_hash: String,
    pub seconds: f64,
}

impl ExperimentReport {
    pub fn cell(&self, scenario: Scenario, design: DesignKind) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.scenario == scenario && c.design == design)
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn average_params(per_rep: &[Vec<ParamSummary>]) -> Vec<(ParamSummary, usize)> {
    let mut acc: Vec<(ParamSummary, usize)> = Vec::new();
    for reps in per_rep {
        for p in reps {
            match acc.iter_mut().find(|(a, _)| a.name == p.name) {
                Some((a, n)) => {
                    a.mean += p.mean;
                    a.sd += p.sd;
                    a.q10 += p.q10;
                    a.q50 += p.q50;
                    a.q90 += p.q90;
                    *n += 1;
                }
                None => acc.push((p.clone(), 1)),
            }
        }
    }
    for (a, n) in &mut acc {
        let k = *n as f64;
        a.mean /= k;
        a.sd /= k;
        a.q10 /= k;
        a.q50 /= k;
        a.q90 /= k;
    }
    acc
}

fn run_cell(
    cfg: &ExperimentConfig,
    world: &World,
    settings: &FitSettings,
    models: &[ModelKind],
    scenario: Scenario,
    design: DesignKind,
) -> Result<CellReport> {
    let start = Instant::now();
    let population = world.population(cfg, scenario)?;
    let spec = world.design(cfg, design);
    let n_reps = cfg.replicates.max(cfg.design_replicates);
    let seeds: Vec<u64> = (0..n_reps).map(|r| replicate_seed(cfg.seed, scenario, design, r)).collect();
    let results: Vec<(usize, Result<Vec<(ModelKind, Result<ModelOutput>)>>)> = seeds
        .par_iter()
        .enumerate()
        .map(|(r, &seed)| {
            let kinds: Vec<ModelKind> = models
                .iter()
                .copied()
                .filter(|k| r < if k.is_design_based() { cfg.design_replicates } else { cfg.replicates })
                .collect();
            let out = draw_survey(&world.frame, &population.ledger, &spec, seed)
                .map_err(LabError::from)
                .map(|survey| run_models(&kinds, &survey, world, settings, seed));
            (r, out)
        })
        .collect();

    let truth = population.truth.county.clone();
    let mut preds: BTreeMap<ModelKind, Vec<ReplicatePrediction>> = BTreeMap::new();
    let mut params: BTreeMap<ModelKind, Vec<Vec<ParamSummary>>> = BTreeMap::new();
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    let mut nonconverged = 0;
    for (r, res) in results {
        let outputs = match res {
            Ok(o) => o,
            Err(e) => {
                failures.push(Failure { replicate: r, model: "survey".into(), reason: e.to_string() });
                continue;
            }
        };
        for (kind, out) in outputs {
            match out {
                Ok(o) => {
                    nonconverged += o.n_nonconverged;
                    estimates.push((
                        EstimateKey {
                            scenario: scenario_label(scenario),
                            design: design.to_string(),
                            model: kind.to_string(),
                            replicate: r,
                        },
                        o.estimates.clone(),
                    ));
                    if !o.params.is_empty() {
                        params.entry(kind).or_default().push(o.params);
                    }
                    preds.entry(kind).or_default().push(ReplicatePrediction {
                        estimates: o.estimates,
                        draws: o.draws,
                        truth: truth.clone(),
                    });
                }
                Err(e) => failures.push(Failure { replicate: r, model: kind.to_string(), reason: e.to_string() }),
            }
        }
    }
    let mut scores = Vec::new();
    let mut param_rows = Vec::new();
    for kind in models {
        if let Some(p) = preds.get(kind) {
            scores.push(score_table(&kind.to_string(), p)?);
        }
        if let Some(p) = params.get(kind) {
            for (s, n) in average_params(p) {
                param_rows.push((kind.to_string(), s, n));
            }
        }
    }
    Ok(CellReport {
        scenario,
        design,
        truth,
        scores,
        params: param_rows,
        estimates,
        failures,
        nonconverged,
        seeds,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs the configured experiment. When `out` is given, report files are
/// written there (see [`write_report`]).
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    let world = World::build(cfg)?;
    let settings = FitSettings::from_config(cfg)?;
    let models = cfg.model_list()?;
    let mut cells = Vec::new();
    for scenario in cfg.scenario_list()? {
        for design in cfg.design_list()? {
            cells.push(pool.install(|| run_cell(cfg, &world, &settings, &models, scenario, design))?);
        }
    }
    let report = ExperimentReport { cells, config_hash: config_hash(cfg), seconds: start.elapsed().as_secs_f64() };
    if let Some(dir) = out {
        write_report(cfg, &report, dir)?;
    }
    Ok(report)
}

/// Long-format rows `scenario,design,model,metric,value` from score tables.
pub fn plot_rows(tables: &[(String, String, Vec<ScoreCsvRow>)]) -> Vec<PlotRow> {
    let mut rows = Vec::new();
    for (scenario, design, table) in tables {
        for r in table {
            for (metric, value) in ScoreCsvRow::METRICS.iter().zip(r.metrics()) {
                rows.push(PlotRow {
                    scenario: scenario.clone(),
                    design: design.clone(),
                    model: r.model.clone(),
                    metric: metric.to_string(),
                    value,
                });
            }
        }
    }
    rows
}

/// Reads score CSVs and writes their long-format plot data.
pub fn emit_plot_data(tables: &[(String, String, PathBuf)], out: &Path) -> Result<usize> {
    let mut loaded = Vec::new();
    for (scenario, design, path) in tables {
        loaded.push((scenario.clone(), design.clone(), io::read_scores(path)?));
    }
    let rows = plot_rows(&loaded);
    io::write_plot_rows(out, &rows)?;
    Ok(rows.len())
}

fn fmt_row(r: &ScoreRow) -> String {
    let s = r.scaled();
    format!(
        "{:<16} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>8.1} {:>8.1} {:>5} {:>6}",
        r.model, s[0], s[1], s[2], s[3], s[4], s[5], r.n_replicates, r.n_excluded
    )
}

/// Plain-text summary of every score and parameter table.
pub fn summary_text(report: &ExperimentReport) -> String {
    let mut t = String::new();
    for c in &report.cells {
        let _ = writeln!(t, "== {} ==", c.label());
        let _ = writeln!(
            t,
            "{:<16} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8} {:>5} {:>6}",
            "model", "bias e4", "var e5", "MSE e4", "CRPS e3", "cvg e2", "wid e2", "reps", "excl"
        );
        for r in &c.scores {
            let _ = writeln!(t, "{}", fmt_row(r));
        }
        if !c.params.is_empty() {
            let _ = writeln!(t, "\n{:<16} {:<12} {:>9} {:>9} {:>9} {:>9} {:>9}", "model", "parameter", "Est", "SD", "Q10", "Q50", "Q90");
            for (m, p, _) in &c.params {
                let _ = writeln!(
                    t,
                    "{:<16} {:<12} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                    m, p.name, p.mean, p.sd, p.q10, p.q50, p.q90
                );
            }
        }
        let _ = writeln!(t, "\nfailures: {}, non-converged grid points: {}\n", c.failures.len(), c.nonconverged);
    }
    t
}

/// Writes, under `dir`: per scenario/design `scores.csv`, `params.csv`,
/// `estimates.csv`, `failures.csv` and `seeds.csv`; plus `plot_data.csv`,
/// `summary.txt`, `config.toml` and `manifest.txt` at the top level. All
/// files except the manifest (which records timings) are reproducible.
pub fn write_report(cfg: &ExperimentConfig, report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tables = Vec::new();
    let mut manifest = String::new();
    let _ = writeln!(manifest, "software = saelab {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(manifest, "config_sha256 = {}", report.config_hash);
    let _ = writeln!(manifest, "master_seed = {}", cfg.seed);
    let _ = writeln!(manifest, "seed_scheme = derive(master, [SURVEY, scenario, design, replicate])");
    let _ = writeln!(manifest, "total_seconds = {:.3}", report.seconds);
    for c in &report.cells {
        let sub = dir.join(c.label());
        std::fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        io::write_scores(&sub.join("scores.csv"), &c.scores)?;
        io::write_params(&sub.join("params.csv"), &c.params)?;
        io::write_estimates(&sub.join("estimates.csv"), &c.estimates)?;
        let mut w = csv::Writer::from_path(sub.join("failures.csv"))?;
        w.write_record(["replicate", "model", "reason"])?;
        for f in &c.failures {
            w.write_record([f.replicate.to_string(), f.model.clone(), f.reason.clone()])?;
        }
        w.flush().map_err(io_err(&sub))?;
        let mut w = csv::Writer::from_path(sub.join("seeds.csv"))?;
        w.write_record(["replicate", "seed"])?;
        for (r, s) in c.seeds.iter().enumerate() {
            w.write_record([r.to_string(), s.to_string()])?;
        }
        w.flush().map_err(io_err(&sub))?;
        tables.push((scenario_label(c.scenario), c.design.to_string(), sub.join("scores.csv")));
        let excluded: usize = c.scores.iter().map(|s| s.n_excluded).sum();
        let _ = writeln!(
            manifest,
            "[{}] replicates = {} seconds = {:.3} excluded = {} failures = {} nonconverged = {}",
            c.label(),
            c.seeds.len(),
            c.seconds,
            excluded,
            c.failures.len(),
            c.nonconverged
        );
    }
    emit_plot_data(&tables, &dir.join("plot_data.csv"))?;
    io::write_text(&dir.join("summary.txt"), &summary_text(report))?;
    io::write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    io::write_text(&dir.join("manifest.txt"), &manifest)
}
