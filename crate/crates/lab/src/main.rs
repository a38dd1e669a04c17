use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use saelab::error::io_err;
use saelab::harness::{run_experiment, summary_text};
use saelab::io;
use saelab::pipeline::{aggregate_draws, build_spec, fit_family, Family, FitSettings};
use saelab::world::{replicate_seed, World};
use saelab::{ExperimentConfig, LabError, Result};
use saelab_core::design::{direct_estimate, naive_estimate, DirectOptions};
use saelab_core::models::{parameter_summaries, ModelKind};
use saelab_core::popgen::{scenario_label, Scenario};
use saelab_core::scoring::{score_table, ReplicatePrediction};
use saelab_core::survey::{draw_survey, DesignKind};

#[derive(Parser)]
#[command(name = "saelab", version, about = "Small-area estimation simulation laboratory")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset used when no config file is given.
    #[arg(long, global = true, default_value = "mini-kenya")]
    preset: String,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the frame, truths, stratum tables and rasters of a scenario.
    SimulatePopulation {
        #[arg(long, default_value = "SUC")]
        scenario: String,
    },
    /// Draws one survey replicate.
    DrawSurvey {
        #[arg(long, default_value = "SUC")]
        scenario: String,
        #[arg(long, default_value = "Stratified")]
        design: String,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Fits a model to a survey; design-based models write estimates, others
    /// write latent posterior draws and parameter summaries.
    Fit {
        #[arg(long)]
        survey: PathBuf,
        #[arg(long)]
        model: String,
    },
    /// Aggregates latent draws of a fitted model to county predictions.
    Aggregate {
        #[arg(long)]
        survey: PathBuf,
        #[arg(long)]
        model: String,
        /// Latent draws written by `fit`.
        #[arg(long)]
        draws: PathBuf,
        /// Stratum table (`county,C_iU,C_iR,E_U,E_R,q_U`) for `A` variants.
        #[arg(long)]
        meta: Option<PathBuf>,
    },
    /// Scores county estimates against a truth file.
    Score {
        /// Estimate files; sets are grouped by model.
        #[arg(long, required = true, num_args = 1..)]
        estimates: Vec<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        /// Optional county draws for the CRPS of model-based estimates.
        #[arg(long, num_args = 1..)]
        county_draws: Vec<PathBuf>,
    },
    /// Runs the full experiment and writes all reports.
    Experiment,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(&c.preset)?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    cfg.out_dir = c.out.clone();
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(io_err(p))
}

fn simulate_population(cfg: &ExperimentConfig, scenario: Scenario) -> Result<()> {
    let world = World::build(cfg)?;
    let pop = world.population(cfg, scenario)?;
    let out = &cfg.out_dir;
    mkdir(out)?;
    io::write_frame(&out.join("frame.csv"), &world.frame)?;
    io::write_truth(&out.join("truth.csv"), &pop.truth)?;
    io::write_stratum_meta(&out.join("stratum_meta.csv"), &world.meta_true)?;
    io::write_stratum_meta(&out.join("stratum_meta_supplied.csv"), &world.meta_supplied)?;
    let [density, county, urban] = io::grid_rasters(&world.grid, &world.mask.urban);
    io::write_ascii_raster(&out.join("density.asc"), &density)?;
    io::write_ascii_raster(&out.join("county.asc"), &county)?;
    io::write_ascii_raster(&out.join("urban.asc"), &urban)?;
    let mut text = format!("{} with {} EAs in {} counties\n", scenario_label(scenario), world.frame.eas.len(), world.n_counties());
    for (c, p) in pop.truth.county.iter().enumerate() {
        text.push_str(&format!("county {c:>3}: prevalence {p:.4}, urban share {:.3}\n", world.frame.urban_child_fraction[c]));
    }
    io::write_text(&out.join("population.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn draw(cfg: &ExperimentConfig, scenario: Scenario, design: DesignKind, replicate: usize) -> Result<()> {
    let world = World::build(cfg)?;
    let pop = world.population(cfg, scenario)?;
    let seed = replicate_seed(cfg.seed, scenario, design, replicate);
    let survey = draw_survey(&world.frame, &pop.ledger, &world.design(cfg, design), seed)?;
    mkdir(&cfg.out_dir)?;
    io::write_survey(&cfg.out_dir.join("survey.csv"), &survey)?;
    println!("{} clusters written (seed {seed})", survey.clusters.len());
    Ok(())
}

fn fit(cfg: &ExperimentConfig, survey_path: &Path, model: &str) -> Result<()> {
    let kind: ModelKind = model.parse()?;
    let world = World::build(cfg)?;
    let survey = io::read_survey(survey_path, &world.frame)?;
    mkdir(&cfg.out_dir)?;
    let key = |m: &str| io::EstimateKey { scenario: String::new(), design: survey.kind.to_string(), model: m.into(), replicate: 0 };
    match kind {
        ModelKind::Naive => io::write_estimates(&cfg.out_dir.join("estimates.csv"), &[(key("naive"), naive_estimate(&survey))])?,
        ModelKind::Direct => io::write_estimates(
            &cfg.out_dir.join("estimates.csv"),
            &[(key("direct"), direct_estimate(&survey, DirectOptions { fpc: cfg.survey.fpc }))],
        )?,
        _ => {
            let family = Family::of(kind).expect("model-based kind");
            let settings = FitSettings::from_config(cfg)?;
            let fm = fit_family(family, &survey, &world, &settings, cfg.seed)?;
            io::write_latent_draws(&cfg.out_dir.join("latent_draws.csv"), &fm.fit.hyper_names, &fm.draws)?;
            let params: Vec<_> =
                parameter_summaries(&fm.spec, &fm.draws).into_iter().map(|p| (kind.to_string(), p, 1)).collect();
            io::write_params(&cfg.out_dir.join("params.csv"), &params)?;
            println!(
                "{kind}: {} grid points, {} non-converged, {} draws",
                fm.fit.points.len(),
                fm.fit.n_nonconverged(),
                fm.draws.n_draws()
            );
        }
    }
    Ok(())
}

fn aggregate(cfg: &ExperimentConfig, survey_path: &Path, model: &str, draws: &Path, meta: Option<&Path>) -> Result<()> {
    let kind: ModelKind = model.parse()?;
    let family = Family::of(kind).ok_or_else(|| LabError::Config(format!("{kind} has no latent draws to aggregate")))?;
    let mut cfg = cfg.clone();
    if let Some(m) = meta {
        cfg.aggregation.supplied_meta = Some(m.to_path_buf());
    }
    let world = World::build(&cfg)?;
    let survey = io::read_survey(survey_path, &world.frame)?;
    let settings = FitSettings::from_config(&cfg)?;
    let spec = build_spec(family, &survey, &world, settings.fpc)?;
    let latent = io::read_latent_draws(draws, spec.n_hyper(), spec.n_latent())?;
    let county = aggregate_draws(kind, &spec, &latent, &world, &settings, cfg.seed)?;
    mkdir(&cfg.out_dir)?;
    io::write_county_draws(&cfg.out_dir.join("county_draws.csv"), &kind.to_string(), 0, &county.draws)?;
    let key = io::EstimateKey { scenario: String::new(), design: survey.kind.to_string(), model: kind.to_string(), replicate: 0 };
    io::write_estimates(&cfg.out_dir.join("estimates.csv"), &[(key, county.summarize())])?;
    println!("{kind}: {} counties x {} draws", county.n_counties(), latent.n_draws());
    Ok(())
}

fn score(cfg: &ExperimentConfig, estimates: &[PathBuf], truth: &Path, county_draws: &[PathBuf]) -> Result<()> {
    let truth = io::read_truth(truth)?;
    let mut draws = std::collections::BTreeMap::new();
    for p in county_draws {
        draws.extend(io::read_county_draws(p)?);
    }
    let mut by_model: Vec<(String, Vec<ReplicatePrediction>)> = Vec::new();
    for p in estimates {
        for (key, est) in io::read_estimates(p)? {
            let pred = ReplicatePrediction {
                draws: draws.get(&(key.model.clone(), key.replicate)).cloned(),
                estimates: est,
                truth: truth.clone(),
            };
            match by_model.iter_mut().find(|(m, _)| *m == key.model) {
                Some((_, v)) => v.push(pred),
                None => by_model.push((key.model.clone(), vec![pred])),
            }
        }
    }
    let rows = by_model.iter().map(|(m, preds)| score_table(m, preds)).collect::<saelab_core::Result<Vec<_>>>()?;
    mkdir(&cfg.out_dir)?;
    io::write_scores(&cfg.out_dir.join("scores.csv"), &rows)?;
    for r in &rows {
        let s = r.scaled();
        println!(
            "{:<16} bias_e4 {:>8.2} var_e5 {:>8.2} mse_e4 {:>8.2} crps_e3 {:>8.2} cvg80_e2 {:>6.1} width_e2 {:>6.1}",
            r.model, s[0], s[1], s[2], s[3], s[4], s[5]
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::SimulatePopulation { scenario } => simulate_population(&cfg, scenario.parse()?),
        Command::DrawSurvey { scenario, design, replicate } => draw(&cfg, scenario.parse()?, design.parse()?, replicate),
        Command::Fit { survey, model } => fit(&cfg, &survey, &model),
        Command::Aggregate { survey, model, draws, meta } => aggregate(&cfg, &survey, &model, &draws, meta.as_deref()),
        Command::Score { estimates, truth, county_draws } => score(&cfg, &estimates, &truth, &county_draws),
        Command::Experiment => {
            let report = run_experiment(&cfg, Some(&cfg.out_dir))?;
            print!("{}", summary_text(&report));
            println!("reports written to {}", cfg.out_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
