//! Synthetic finite populations: the enumeration-area frame, scenario risk
//! surfaces and realized child-level outcomes with their county truths.
//!
//! Strata are indexed `2 * county + 0` for urban and `2 * county + 1` for rural.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)]
use num_traits::Float;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

use crate::error::{bail, Error, Result};
use crate::geodata::{DensityGrid, UrbanMask};
use crate::gmrf::{matern_params, sample_gmrf, spde_precision, SpdeOperator};
use crate::math::expit;
use crate::rng::{self, labels};

pub const URBAN: usize = 0;
pub const RURAL: usize = 1;

pub fn stratum_index(county: usize, urban: bool) -> usize {
    2 * county + if urban { URBAN } else { RURAL }
}

/// Shifted negative binomial count: `floor + NB(mean - floor, size)` drawn as
/// a gamma-Poisson mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountDistribution {
    pub floor: u32,
    pub mean: f64,
    /// Negative binomial size (dispersion); larger is closer to Poisson.
    pub size: f64,
}

impl CountDistribution {
    fn validate(&self, what: &str) -> Result<()> {
        if !(self.mean >= self.floor as f64) || !(self.size > 0.0) || !self.mean.is_finite() {
            bail!(Config, "{what} distribution needs mean >= floor and positive size");
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let excess = self.mean - self.floor as f64;
        if excess <= 0.0 {
            return self.floor;
        }
        let rate = Gamma::new(self.size, excess / self.size).expect("validated").sample(rng);
        let extra = if rate > 0.0 { Poisson::new(rate).expect("positive rate").sample(rng) } else { 0.0 };
        self.floor + extra as u32
    }
}

/// Frame construction settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    /// EA counts per county as `[urban, rural]`.
    pub eas: Vec<[usize; 2]>,
    /// Households per EA as `[urban, rural]`.
    pub households: [CountDistribution; 2],
    /// Children per EA as `[urban, rural]`.
    pub children: [CountDistribution; 2],
    pub household_min: u32,
}

impl FrameConfig {
    /// Default distributions: households mean 120 urban / 80 rural with floor
    /// 25; children mean 60 urban / 90 rural with floor 1.
    pub fn with_counts(eas: Vec<[usize; 2]>) -> Self {
        Self {
            eas,
            households: [
                CountDistribution { floor: 25, mean: 120.0, size: 4.0 },
                CountDistribution { floor: 25, mean: 80.0, size: 4.0 },
            ],
            children: [
                CountDistribution { floor: 1, mean: 60.0, size: 4.0 },
                CountDistribution { floor: 1, mean: 90.0, size: 4.0 },
            ],
            household_min: 25,
        }
    }
}

/// One enumeration area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ea {
    pub county: usize,
    pub urban: bool,
    pub cell: usize,
    pub x: f64,
    pub y: f64,
    pub households: u32,
    pub children: u32,
}

impl Ea {
    pub fn stratum(&self) -> usize {
        stratum_index(self.county, self.urban)
    }
}

/// The sampling frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationFrame {
    pub eas: Vec<Ea>,
    pub n_counties: usize,
    /// EA indices per stratum.
    pub strata: Vec<Vec<usize>>,
    /// Urban share of children per county.
    pub urban_child_fraction: Vec<f64>,
}

impl PopulationFrame {
    pub fn n_strata(&self) -> usize {
        2 * self.n_counties
    }

    pub fn stratum_counts(&self) -> Vec<[usize; 2]> {
        (0..self.n_counties)
            .map(|c| [self.strata[2 * c].len(), self.strata[2 * c + 1].len()])
            .collect()
    }

    /// Total children per stratum.
    pub fn stratum_children(&self) -> Vec<u64> {
        self.strata.iter().map(|s| s.iter().map(|&k| self.eas[k].children as u64).sum()).collect()
    }

    pub fn total_children(&self) -> u64 {
        self.eas.iter().map(|e| e.children as u64).sum()
    }
}

/// Places EAs at cell centres, choosing cells with probability proportional
/// to density within each stratum, and draws household and child counts.
pub fn synthesize_frame(
    grid: &DensityGrid,
    mask: &UrbanMask,
    config: &FrameConfig,
    seed: u64,
) -> Result<PopulationFrame> {
    let m = grid.n_counties();
    if config.eas.len() != m {
        bail!(Dimension, "EA counts given for {} counties, grid has {m}", config.eas.len());
    }
    if config.household_min < 1 {
        bail!(Config, "household minimum must be positive");
    }
    for s in 0..2 {
        config.households[s].validate("household")?;
        config.children[s].validate("children")?;
        if config.children[s].floor < 1 {
            bail!(Config, "children distribution can produce empty EAs; use a floor of at least 1");
        }
        if config.households[s].floor < config.household_min {
            bail!(Config, "household floor is below the minimum of {}", config.household_min);
        }
    }
    let mut rng = rng::rng_for(seed, &[labels::FRAME]);
    let cells = grid.county_cells();
    let mut eas = Vec::new();
    let mut strata = vec![Vec::new(); 2 * m];
    for c in 0..m {
        for s in [URBAN, RURAL] {
            let count = config.eas[c][s];
            if count == 0 {
                continue;
            }
            let urban = s == URBAN;
            let candidates: Vec<usize> =
                cells[c].iter().copied().filter(|&k| mask.urban[k] == urban).collect();
            let weights: Vec<f64> = candidates.iter().map(|&k| grid.values[k]).collect();
            if !(weights.iter().sum::<f64>() > 0.0) {
                bail!(
                    Domain,
                    "{} stratum of county {c} has no density mass for {count} EAs",
                    if urban { "urban" } else { "rural" }
                );
            }
            let pick = WeightedIndex::new(&weights)
                .map_err(|e| Error::Domain(alloc::format!("county {c}: {e}")))?;
            for _ in 0..count {
                let cell = candidates[pick.sample(&mut rng)];
                let (x, y) = grid.cell_center(cell);
                let households = config.households[s].sample(&mut rng).max(config.household_min);
                let children = config.children[s].sample(&mut rng);
                strata[2 * c + s].push(eas.len());
                eas.push(Ea { county: c, urban, cell, x, y, households, children });
            }
        }
    }
    let mut frame = PopulationFrame { eas, n_counties: m, strata, urban_child_fraction: Vec::new() };
    let sc = frame.stratum_children();
    frame.urban_child_fraction = (0..m)
        .map(|c| {
            let tot = sc[2 * c] + sc[2 * c + 1];
            if tot == 0 {
                0.0
            } else {
                sc[2 * c] as f64 / tot as f64
            }
        })
        .collect();
    Ok(frame)
}

/// Which effects are present in the risk model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Scenario {
    pub spatial: bool,
    pub urban: bool,
    pub cluster: bool,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario { spatial: false, urban: false, cluster: false },
        Scenario { spatial: true, urban: false, cluster: false },
        Scenario { spatial: true, urban: true, cluster: false },
        Scenario { spatial: true, urban: true, cluster: true },
    ];

    pub fn code(&self) -> u64 {
        (self.spatial as u64) | (self.urban as u64) << 1 | (self.cluster as u64) << 2
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = if self.spatial { 'S' } else { 's' };
        let u = if self.urban { 'U' } else { 'u' };
        let c = if self.cluster { 'C' } else { 'c' };
        write!(f, "{s}{u}{c}")
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.strip_prefix("Pop_").unwrap_or(s);
        let ch: Vec<char> = s.chars().collect();
        if ch.len() != 3 {
            bail!(Config, "scenario '{s}' is not a three-letter code like SUC");
        }
        let flag = |c: char, on: char| -> Result<bool> {
            if c == on {
                Ok(true)
            } else if c == on.to_ascii_lowercase() {
                Ok(false)
            } else {
                Err(Error::Config(alloc::format!("unexpected letter '{c}' in scenario '{s}'")))
            }
        };
        Ok(Scenario { spatial: flag(ch[0], 'S')?, urban: flag(ch[1], 'U')?, cluster: flag(ch[2], 'C')? })
    }
}

/// Risk model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioParams {
    pub scenario: Scenario,
    pub beta0: f64,
    pub beta_urban: f64,
    pub sigma_spatial: f64,
    pub range: f64,
    pub sigma_cluster: f64,
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_spatial >= 0.0) || !(self.sigma_cluster >= 0.0) {
            bail!(Config, "standard deviations must be nonnegative");
        }
        if self.scenario.spatial && !(self.range > 0.0) {
            bail!(Config, "a spatial scenario needs a positive range");
        }
        Ok(())
    }
}

/// Per-EA risks and the effects that built them.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSurface {
    pub p: Vec<f64>,
    pub eta: Vec<f64>,
    pub spatial: Vec<f64>,
    pub cluster: Vec<f64>,
    /// Field values at mesh nodes when the scenario is spatial.
    pub field_nodes: Option<Vec<f64>>,
}

/// Samples the spatial field once on the mesh, projects it to EA locations
/// and adds the urban and iid cluster effects on the logit scale.
pub fn simulate_risk(
    frame: &PopulationFrame,
    params: &ScenarioParams,
    spde: &SpdeOperator,
    seed: u64,
) -> Result<RiskSurface> {
    params.validate()?;
    let n = frame.eas.len();
    let sc = params.scenario;
    let (spatial, field_nodes) = if sc.spatial && params.sigma_spatial > 0.0 {
        let (kappa, tau) = matern_params(params.range, params.sigma_spatial)?;
        let q = spde_precision(spde, kappa, tau)?;
        let field = sample_gmrf(&q, 1, rng::derive_seed(seed, &[labels::RISK, 1]))?.remove(0);
        let pts: Vec<(f64, f64)> = frame.eas.iter().map(|e| (e.x, e.y)).collect();
        let a = spde.mesh.projector(&pts)?;
        (a.mul_vec(&field), Some(field))
    } else {
        (vec![0.0; n], None)
    };
    let cluster: Vec<f64> = if sc.cluster {
        let mut rng = rng::rng_for(seed, &[labels::RISK, 2]);
        (0..n)
            .map(|_| params.sigma_cluster * rng.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        vec![0.0; n]
    };
    let eta: Vec<f64> = (0..n)
        .map(|k| {
            let urb = if sc.urban && frame.eas[k].urban { params.beta_urban } else { 0.0 };
            params.beta0 + spatial[k] + urb + cluster[k]
        })
        .collect();
    let p = eta.iter().map(|&e| expit(e)).collect();
    Ok(RiskSurface { p, eta, spatial, cluster, field_nodes })
}

/// Realized child-level outcomes: the sorted indices of children with an
/// event in each EA.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeLedger {
    pub events: Vec<Vec<u32>>,
}

impl OutcomeLedger {
    pub fn event_count(&self, ea: usize) -> usize {
        self.events[ea].len()
    }
}

/// Finite-population truths.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTable {
    pub county: Vec<f64>,
    pub county_children: Vec<u64>,
    pub county_events: Vec<u64>,
    /// Per stratum; `NaN` for empty strata.
    pub stratum: Vec<f64>,
    pub stratum_children: Vec<u64>,
    pub stratum_events: Vec<u64>,
}

/// Draws a Bernoulli outcome for every child and tallies the truths.
pub fn realize_outcomes(frame: &PopulationFrame, risk: &RiskSurface, seed: u64) -> Result<(OutcomeLedger, TruthTable)> {
    if risk.p.len() != frame.eas.len() {
        bail!(Dimension, "risk surface has {} EAs, frame has {}", risk.p.len(), frame.eas.len());
    }
    let mut rng = rng::rng_for(seed, &[labels::OUTCOMES]);
    let events: Vec<Vec<u32>> = frame
        .eas
        .iter()
        .zip(&risk.p)
        .map(|(ea, &p)| (0..ea.children).filter(|_| rng.random::<f64>() < p).collect())
        .collect();
    let ledger = OutcomeLedger { events };
    let truth = truth_table(frame, &ledger);
    Ok((ledger, truth))
}

pub fn truth_table(frame: &PopulationFrame, ledger: &OutcomeLedger) -> TruthTable {
    let m = frame.n_counties;
    let mut stratum_children = vec![0u64; 2 * m];
    let mut stratum_events = vec![0u64; 2 * m];
    for (k, ea) in frame.eas.iter().enumerate() {
        stratum_children[ea.stratum()] += ea.children as u64;
        stratum_events[ea.stratum()] += ledger.events[k].len() as u64;
    }
    let ratio = |e: u64, n: u64| if n == 0 { f64::NAN } else { e as f64 / n as f64 };
    let county_children: Vec<u64> = (0..m).map(|c| stratum_children[2 * c] + stratum_children[2 * c + 1]).collect();
    let county_events: Vec<u64> = (0..m).map(|c| stratum_events[2 * c] + stratum_events[2 * c + 1]).collect();
    TruthTable {
        county: (0..m).map(|c| ratio(county_events[c], county_children[c])).collect(),
        stratum: (0..2 * m).map(|s| ratio(stratum_events[s], stratum_children[s])).collect(),
        county_children,
        county_events,
        stratum_children,
        stratum_events,
    }
}

/// Human-readable scenario label such as `Pop_SUC`.
pub fn scenario_label(s: Scenario) -> String {
    alloc::format!("Pop_{s}")
}
