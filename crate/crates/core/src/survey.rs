//! Two-stage stratified cluster designs.
//!
//! The first stage selects EAs within each county x urban/rural stratum,
//! either with probability proportional to household count (Midzuno's method)
//! or by simple random sampling. The second stage takes a fixed number of
//! households per selected EA by simple random sampling. Children are attached
//! to households by an even partition of the EA's children with the remainder
//! spread over the first households.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::index;
use rand::Rng;

use crate::error::{bail, Result};
use crate::popgen::{OutcomeLedger, PopulationFrame, RURAL, URBAN};
use crate::rng::{self, labels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DesignKind {
    Unstratified,
    Stratified,
}

impl core::fmt::Display for DesignKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            DesignKind::Unstratified => "Unstratified",
            DesignKind::Stratified => "Stratified",
        })
    }
}

impl core::str::FromStr for DesignKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unstratified" => Ok(DesignKind::Unstratified),
            "stratified" => Ok(DesignKind::Stratified),
            _ => Err(crate::Error::Config(alloc::format!("unknown design '{s}'"))),
        }
    }
}

/// Survey design settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub kind: DesignKind,
    /// Clusters per county (Unstratified).
    pub county_totals: Vec<usize>,
    /// Clusters per stratum as `[urban, rural]` per county (Stratified).
    pub stratum_counts: Vec<[usize; 2]>,
    pub households_per_cluster: u32,
}

/// Round-half-up urban share of a county total; rural takes the rest.
pub fn split_total(total: usize, urban_share: f64) -> [usize; 2] {
    let urban = ((total as f64 * urban_share + 0.5).floor() as usize).min(total);
    [urban, total - urban]
}

/// Clusters per stratum as `[urban, rural]` for each county.
pub fn allocate_clusters(frame: &PopulationFrame, design: &DesignSpec) -> Result<Vec<[usize; 2]>> {
    let m = frame.n_counties;
    let alloc = match design.kind {
        DesignKind::Unstratified => {
            if design.county_totals.len() != m {
                bail!(Dimension, "{} county totals for {m} counties", design.county_totals.len());
            }
            (0..m).map(|c| split_total(design.county_totals[c], frame.urban_child_fraction[c])).collect()
        }
        DesignKind::Stratified => {
            if design.stratum_counts.len() != m {
                bail!(Dimension, "{} stratum allocations for {m} counties", design.stratum_counts.len());
            }
            design.stratum_counts.clone()
        }
    };
    let avail = frame.stratum_counts();
    for c in 0..m {
        for s in [URBAN, RURAL] {
            if alloc[c][s] > avail[c][s] {
                bail!(
                    InfeasibleDesign,
                    "county {c} {} stratum needs {} clusters but has {} EAs",
                    if s == URBAN { "urban" } else { "rural" },
                    alloc[c][s],
                    avail[c][s]
                );
            }
        }
    }
    Ok(alloc)
}

/// First-stage selection mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Pps,
    Srs,
}

/// First-stage and conditional second-stage inclusion probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionProbabilities {
    pub first_stage: Vec<f64>,
    pub second_stage: Vec<f64>,
}

impl InclusionProbabilities {
    /// Overall child inclusion probability per EA.
    pub fn overall(&self) -> Vec<f64> {
        self.first_stage.iter().zip(&self.second_stage).map(|(a, b)| a * b).collect()
    }
}

pub fn inclusion_probabilities(
    sizes: &[u32],
    n: usize,
    mode: SelectionMode,
    households_per_cluster: u32,
) -> Result<InclusionProbabilities> {
    let big_n = sizes.len();
    if let Some(k) = sizes.iter().position(|&h| h < households_per_cluster) {
        bail!(Frame, "EA {k} lists {} households, fewer than {households_per_cluster}", sizes[k]);
    }
    if n > big_n {
        bail!(InfeasibleDesign, "sample of {n} from {big_n} units");
    }
    // A take-all stratum is a census whatever the size measure.
    let first_stage: Vec<f64> = match mode {
        _ if n == big_n => vec![1.0; big_n],
        SelectionMode::Srs => vec![n as f64 / big_n as f64; big_n],
        SelectionMode::Pps => {
            let total: f64 = sizes.iter().map(|&h| h as f64).sum();
            sizes.iter().map(|&h| n as f64 * h as f64 / total).collect()
        }
    };
    if let Some(k) = first_stage.iter().position(|&p| p > 1.0 + 1e-12) {
        bail!(InfeasibleDesign, "unit {k} would have inclusion probability {}", first_stage[k]);
    }
    let second_stage = sizes.iter().map(|&h| households_per_cluster as f64 / h as f64).collect();
    Ok(InclusionProbabilities { first_stage, second_stage })
}

fn pps_targets(sizes: &[u32], n: usize) -> Result<Vec<f64>> {
    if sizes.is_empty() || n > sizes.len() {
        bail!(InfeasibleDesign, "sample of {n} from {} units", sizes.len());
    }
    let total: f64 = sizes.iter().map(|&h| h as f64).sum();
    if !(total > 0.0) {
        bail!(InfeasibleDesign, "all size measures are zero");
    }
    if n == sizes.len() {
        return Ok(vec![1.0; n]);
    }
    let pi: Vec<f64> = sizes.iter().map(|&h| n as f64 * h as f64 / total).collect();
    if let Some(k) = pi.iter().position(|&p| p > 1.0 + 1e-12) {
        bail!(InfeasibleDesign, "unit {k} has target inclusion probability {} > 1", pi[k]);
    }
    Ok(pi)
}

/// First-draw probabilities of the classical Midzuno scheme.
pub fn midzuno_first_draw(pi: &[f64], n: usize) -> Vec<f64> {
    let big_n = pi.len() as f64;
    let nf = n as f64;
    if pi.len() == n {
        return vec![1.0 / big_n; pi.len()];
    }
    pi.iter()
        .map(|&p| (big_n - 1.0) / (big_n - nf) * (p - (nf - 1.0) / (big_n - 1.0)))
        .collect()
}

fn draw_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = k;
            acc += w;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// Classical Midzuno selection: one unit with the adjusted first-draw
/// probabilities, then `n - 1` by SRS from the rest. Fails when any adjusted
/// probability is negative.
pub fn midzuno_classical<R: Rng + ?Sized>(sizes: &[u32], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let pi = pps_targets(sizes, n)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let first = midzuno_first_draw(&pi, n);
    if let Some(k) = first.iter().position(|&p| p < -1e-12) {
        bail!(
            InfeasibleDesign,
            "Midzuno first-draw probability of unit {k} is negative ({}); targets are unattainable",
            first[k]
        );
    }
    let clipped: Vec<f64> = first.iter().map(|p| p.max(0.0)).collect();
    let j = draw_index(&clipped, rng);
    let rest: Vec<usize> = (0..sizes.len()).filter(|&k| k != j).collect();
    let mut out = vec![j];
    out.extend(index::sample(rng, rest.len(), n - 1).into_iter().map(|i| rest[i]));
    out.sort_unstable();
    Ok(out)
}

/// Inclusion probabilities proportional to `x` for a sample of size `n`,
/// capping units at one and redistributing.
pub fn capped_inclusion(x: &[f64], n: usize) -> Vec<f64> {
    let mut pi = vec![0.0; x.len()];
    let mut capped = vec![false; x.len()];
    loop {
        let free_total: f64 = x.iter().zip(&capped).filter(|(_, &c)| !c).map(|(v, _)| v).sum();
        let n_capped = capped.iter().filter(|&&c| c).count();
        let budget = n as f64 - n_capped as f64;
        let mut changed = false;
        for k in 0..x.len() {
            if capped[k] {
                pi[k] = 1.0;
            } else {
                pi[k] = if free_total > 0.0 { budget * x[k] / free_total } else { 0.0 };
                if pi[k] >= 1.0 {
                    capped[k] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return pi;
        }
    }
}

/// Tillé's elimination procedure: returns the retained units for target
/// inclusion probabilities `pi` (summing to an integer).
fn tille_elimination<R: Rng + ?Sized>(pi: &[f64], rng: &mut R) -> Vec<bool> {
    let eps = 1e-9;
    let mut keep: Vec<bool> = pi.iter().map(|&p| p > eps).collect();
    let active: Vec<usize> = (0..pi.len()).filter(|&k| pi[k] > eps && pi[k] < 1.0 - eps).collect();
    let size: f64 = active.iter().map(|&k| pi[k]).sum();
    let n_keep = (size + 0.5).floor() as usize;
    let x: Vec<f64> = active.iter().map(|&k| pi[k]).collect();
    let big_n = active.len();
    let mut alive = vec![true; big_n];
    let mut b = vec![1.0; big_n];
    for step in 1..=big_n.saturating_sub(n_keep) {
        let a = capped_inclusion(&x, big_n - step);
        let weights: Vec<f64> = (0..big_n)
            .map(|k| if alive[k] && b[k] > 0.0 { (1.0 - a[k] / b[k]).max(0.0) } else { 0.0 })
            .collect();
        let j = draw_index(&weights, rng);
        alive[j] = false;
        b = a;
    }
    for (i, &k) in active.iter().enumerate() {
        keep[k] = alive[i];
    }
    keep
}

/// Generalized Midzuno selection: the complement of Tillé's elimination
/// procedure applied to `1 - pi`. Valid whenever every target is at most one.
pub fn midzuno_generalized<R: Rng + ?Sized>(sizes: &[u32], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let pi = pps_targets(sizes, n)?;
    let complement: Vec<f64> = pi.iter().map(|p| (1.0 - p).max(0.0)).collect();
    let kept = tille_elimination(&complement, rng);
    Ok((0..sizes.len()).filter(|&k| !kept[k]).collect())
}

/// PPS without replacement by Midzuno's method: the classical scheme when its
/// first-draw probabilities are nonnegative, otherwise the generalized scheme.
/// Either way the inclusion probabilities are `n H_c / sum H`.
pub fn midzuno_sample<R: Rng + ?Sized>(sizes: &[u32], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let pi = pps_targets(sizes, n)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    if midzuno_first_draw(&pi, n).iter().all(|&p| p >= -1e-12) {
        midzuno_classical(sizes, n, rng)
    } else {
        midzuno_generalized(sizes, n, rng)
    }
}

/// Seeded convenience wrapper around [`midzuno_sample`].
pub fn midzuno_sample_seeded(sizes: &[u32], n: usize, seed: u64) -> Result<Vec<usize>> {
    midzuno_sample(sizes, n, &mut rng::rng_for(seed, &[labels::SURVEY]))
}

/// Children per household under the even-partition rule.
pub fn household_children(children: u32, households: u32) -> impl Iterator<Item = u32> {
    let base = children / households;
    let rem = children % households;
    (0..households).map(move |h| base + u32::from(h < rem))
}

/// Household holding child `j` under the even-partition rule.
pub fn household_of_child(j: u32, children: u32, households: u32) -> u32 {
    let base = children / households;
    let rem = children % households;
    let big = rem * (base + 1);
    if j < big {
        j / (base + 1)
    } else {
        rem + (j - big) / base
    }
}

/// One sampled cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurveyCluster {
    pub cluster_id: usize,
    pub ea: usize,
    pub county: usize,
    pub stratum: usize,
    pub urban: bool,
    pub x: f64,
    pub y: f64,
    pub y_c: u32,
    pub n_c: u32,
    pub households: u32,
    pub first_stage_prob: f64,
    pub child_weight: f64,
    pub cluster_weight: f64,
}

/// A realized survey.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyDataset {
    pub kind: DesignKind,
    pub n_counties: usize,
    pub clusters: Vec<SurveyCluster>,
    /// EA counts per stratum in the frame.
    pub stratum_sizes: Vec<usize>,
}

impl SurveyDataset {
    pub fn county_clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_counties];
        for (k, c) in self.clusters.iter().enumerate() {
            out[c.county].push(k);
        }
        out
    }
}

/// Draws one survey: first stage per stratum, 25 households per cluster,
/// outcomes tallied from the ledger, and design weights.
pub fn draw_survey(
    frame: &PopulationFrame,
    outcomes: &OutcomeLedger,
    design: &DesignSpec,
    seed: u64,
) -> Result<SurveyDataset> {
    let alloc = allocate_clusters(frame, design)?;
    let hh = design.households_per_cluster;
    if hh == 0 {
        bail!(Config, "households per cluster must be positive");
    }
    let mut rng = rng::rng_for(seed, &[labels::SURVEY]);
    let mut clusters = Vec::new();
    for (s, members) in frame.strata.iter().enumerate() {
        let (county, urb) = (s / 2, s % 2);
        let n = alloc[county][urb];
        if n == 0 {
            continue;
        }
        let sizes: Vec<u32> = members.iter().map(|&k| frame.eas[k].households).collect();
        let mode = match design.kind {
            DesignKind::Stratified => SelectionMode::Pps,
            DesignKind::Unstratified => SelectionMode::Srs,
        };
        let probs = inclusion_probabilities(&sizes, n, mode, hh)?;
        let mut chosen = match mode {
            SelectionMode::Pps => midzuno_sample(&sizes, n, &mut rng)?,
            SelectionMode::Srs => index::sample(&mut rng, members.len(), n).into_vec(),
        };
        chosen.sort_unstable();
        let total_h: f64 = sizes.iter().map(|&h| h as f64).sum();
        let big_n = members.len() as f64;
        for &i in &chosen {
            let k = members[i];
            let ea = &frame.eas[k];
            let picked = index::sample(&mut rng, ea.households as usize, hh as usize);
            let mut in_sample = vec![false; ea.households as usize];
            for h in picked.iter() {
                in_sample[h] = true;
            }
            let n_c: u32 = household_children(ea.children, ea.households)
                .enumerate()
                .filter(|(h, _)| in_sample[*h])
                .map(|(_, c)| c)
                .sum();
            let y_c = outcomes.events[k]
                .iter()
                .filter(|&&j| in_sample[household_of_child(j, ea.children, ea.households) as usize])
                .count() as u32;
            let child_weight = match mode {
                _ if n == members.len() => ea.households as f64 / hh as f64,
                SelectionMode::Pps => total_h / (hh as f64 * n as f64),
                SelectionMode::Srs => big_n * ea.households as f64 / (hh as f64 * n as f64),
            };
            clusters.push(SurveyCluster {
                cluster_id: clusters.len(),
                ea: k,
                county,
                stratum: s,
                urban: ea.urban,
                x: ea.x,
                y: ea.y,
                y_c,
                n_c,
                households: ea.households,
                first_stage_prob: probs.first_stage[i],
                child_weight,
                cluster_weight: n_c as f64 * child_weight,
            });
        }
    }
    Ok(SurveyDataset {
        kind: design.kind,
        n_counties: frame.n_counties,
        clusters,
        stratum_sizes: frame.strata.iter().map(Vec::len).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn allocation_rounds_half_up() {
        assert_eq!(split_total(10, 0.0), [0, 10]);
        assert_eq!(split_total(10, 0.37), [4, 6]);
        assert_eq!(split_total(10, 0.35), [4, 6]);
        assert_eq!(split_total(10, 1.0), [10, 0]);
    }

    #[test]
    fn inclusion_probability_examples() {
        let p = inclusion_probabilities(&[100, 200, 300, 400], 2, SelectionMode::Pps, 25).unwrap();
        for (a, b) in p.first_stage.iter().zip([0.2, 0.4, 0.6, 0.8]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(p.second_stage, vec![0.25, 0.125, 25.0 / 300.0, 0.0625]);
        let s = inclusion_probabilities(&[30; 10], 2, SelectionMode::Srs, 25).unwrap();
        assert!(s.first_stage.iter().all(|&v| v == 0.2));
        assert!(inclusion_probabilities(&[100, 900, 50], 2, SelectionMode::Pps, 25).is_err());
        assert_eq!(inclusion_probabilities(&[100, 900], 2, SelectionMode::Pps, 25).unwrap().first_stage, vec![1.0, 1.0]);
        assert!(inclusion_probabilities(&[24, 100], 1, SelectionMode::Pps, 25).is_err());
    }

    #[test]
    fn classical_midzuno_rejects_unattainable_targets() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert!(midzuno_classical(&[100, 200, 300, 400], 2, &mut rng).is_err());
        assert_eq!(midzuno_sample(&[100, 200, 300, 400], 2, &mut rng).unwrap().len(), 2);
    }

    #[test]
    fn capped_inclusion_caps_and_sums() {
        let p = capped_inclusion(&[10.0, 1.0, 1.0, 1.0], 2);
        assert_eq!(p[0], 1.0);
        assert!((p.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn household_partition_is_consistent() {
        for (children, households) in [(60, 120), (90, 80), (7, 3), (0, 25), (250, 25)] {
            let per: Vec<u32> = household_children(children, households).collect();
            assert_eq!(per.iter().sum::<u32>(), children);
            let mut count = vec![0; households as usize];
            for j in 0..children {
                count[household_of_child(j, children, households) as usize] += 1;
            }
            assert_eq!(count, per);
        }
    }
}
