//! Design-based county estimators: the naive binomial proportion and the
//! weighted (Hájek) direct estimator with stratified Taylor-linearized
//! variance, plus the logit transform used as smoothed-direct input.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::math::{expit, logit, normal_quantile, Z80};
use crate::survey::SurveyDataset;

/// Bit flags attached to a county estimate.
pub mod flags {
    /// No sampled children in the county.
    pub const MISSING: u8 = 1;
    /// Point estimate is exactly 0 or 1.
    pub const BOUNDARY: u8 = 2;
    /// No stratum in the county has two or more clusters.
    pub const UNDEFINED_VAR: u8 = 4;
    /// Variance estimate is exactly zero.
    pub const ZERO_VARIANCE: u8 = 8;
    /// At least one stratum contributed a single cluster.
    pub const SINGLE_CLUSTER_STRATUM: u8 = 16;

    const NAMES: [(u8, &str); 5] = [
        (MISSING, "missing"),
        (BOUNDARY, "boundary"),
        (UNDEFINED_VAR, "undefined_var"),
        (ZERO_VARIANCE, "zero_variance"),
        (SINGLE_CLUSTER_STRATUM, "single_cluster_stratum"),
    ];

    /// `|`-separated flag names, empty when no flag is set.
    pub fn describe(bits: u8) -> alloc::string::String {
        let mut out = alloc::string::String::new();
        for (bit, name) in NAMES {
            if bits & bit != 0 {
                if !out.is_empty() {
                    out.push('|');
                }
                out.push_str(name);
            }
        }
        out
    }

    pub fn parse(text: &str) -> Option<u8> {
        let mut bits = 0;
        for part in text.split('|').filter(|p| !p.is_empty()) {
            bits |= NAMES.iter().find(|(_, n)| *n == part)?.0;
        }
        Some(bits)
    }
}

/// One county's estimate. Undefined quantities are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountyEstimate {
    pub estimate: f64,
    pub var: f64,
    pub logit_est: f64,
    pub logit_var: f64,
    pub lower80: f64,
    pub upper80: f64,
    pub flags: u8,
}

impl CountyEstimate {
    fn missing() -> Self {
        CountyEstimate {
            estimate: f64::NAN,
            var: f64::NAN,
            logit_est: f64::NAN,
            logit_var: f64::NAN,
            lower80: f64::NAN,
            upper80: f64::NAN,
            flags: flags::MISSING,
        }
    }

    fn from_prob(p: f64, var: f64, logit_var: f64, mut bits: u8) -> Self {
        if p <= 0.0 || p >= 1.0 {
            bits |= flags::BOUNDARY;
            return CountyEstimate {
                estimate: p,
                var,
                logit_est: f64::NAN,
                logit_var: f64::NAN,
                lower80: f64::NAN,
                upper80: f64::NAN,
                flags: bits,
            };
        }
        let z = logit(p);
        let (lower80, upper80) = if logit_var.is_finite() {
            let half = Z80 * logit_var.sqrt();
            (expit(z - half), expit(z + half))
        } else {
            (f64::NAN, f64::NAN)
        };
        CountyEstimate { estimate: p, var, logit_est: z, logit_var, lower80, upper80, flags: bits }
    }

    /// Usable for scoring: finite estimate and interval.
    pub fn is_scorable(&self) -> bool {
        self.flags & (flags::MISSING | flags::BOUNDARY | flags::UNDEFINED_VAR) == 0
    }

    /// Deterministic predictive quantile draws `expit(Z + sqrt(V) z_k)` at
    /// the normal quantiles of `(k + 1/2)/m`.
    pub fn predictive_draws(&self, m: usize) -> Vec<f64> {
        let sd = self.logit_var.max(0.0).sqrt();
        (0..m)
            .map(|k| expit(self.logit_est + sd * normal_quantile((k as f64 + 0.5) / m as f64)))
            .collect()
    }
}

/// Per-county estimates from one estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct CountyEstimates {
    pub counties: Vec<CountyEstimate>,
}

impl CountyEstimates {
    pub fn len(&self) -> usize {
        self.counties.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counties.is_empty()
    }
}

/// Pooled binomial proportion per county with a logit Wald interval.
pub fn naive_estimate(survey: &SurveyDataset) -> CountyEstimates {
    let mut y = vec![0u64; survey.n_counties];
    let mut n = vec![0u64; survey.n_counties];
    for c in &survey.clusters {
        y[c.county] += c.y_c as u64;
        n[c.county] += c.n_c as u64;
    }
    let counties = (0..survey.n_counties)
        .map(|i| {
            if n[i] == 0 {
                return CountyEstimate::missing();
            }
            let big_n = n[i] as f64;
            let p = y[i] as f64 / big_n;
            let var = p * (1.0 - p) / big_n;
            CountyEstimate::from_prob(p, var, 1.0 / (big_n * p * (1.0 - p)), 0)
        })
        .collect();
    CountyEstimates { counties }
}

/// Options for the direct estimator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DirectOptions {
    /// Apply the first-stage finite-population correction `1 - n_h/N_h`.
    pub fpc: bool,
}

/// Hájek ratio estimator with stratified between-cluster linearized variance.
pub fn direct_estimate(survey: &SurveyDataset, opts: DirectOptions) -> CountyEstimates {
    let by_county = survey.county_clusters();
    let counties = by_county
        .iter()
        .map(|members| {
            let w_total: f64 = members
                .iter()
                .map(|&k| survey.clusters[k].child_weight * survey.clusters[k].n_c as f64)
                .sum();
            if members.is_empty() || !(w_total > 0.0) {
                return CountyEstimate::missing();
            }
            let wy: f64 = members
                .iter()
                .map(|&k| survey.clusters[k].child_weight * survey.clusters[k].y_c as f64)
                .sum();
            let p = wy / w_total;
            let mut strata: Vec<(usize, Vec<f64>)> = Vec::new();
            for &k in members {
                let c = &survey.clusters[k];
                let z = c.child_weight * (c.y_c as f64 - p * c.n_c as f64) / w_total;
                match strata.iter_mut().find(|(s, _)| *s == c.stratum) {
                    Some((_, zs)) => zs.push(z),
                    None => strata.push((c.stratum, vec![z])),
                }
            }
            let mut bits = 0;
            let mut var = 0.0;
            let mut defined = false;
            for (s, zs) in &strata {
                let nh = zs.len();
                if nh < 2 {
                    bits |= flags::SINGLE_CLUSTER_STRATUM;
                    continue;
                }
                defined = true;
                let nf = nh as f64;
                let mean = zs.iter().sum::<f64>() / nf;
                let ss: f64 = zs.iter().map(|z| (z - mean) * (z - mean)).sum();
                let mut contrib = nf / (nf - 1.0) * ss;
                if opts.fpc {
                    let big_n = survey.stratum_sizes.get(*s).copied().unwrap_or(0) as f64;
                    if big_n > 0.0 {
                        contrib *= (1.0 - nf / big_n).max(0.0);
                    }
                }
                var += contrib;
            }
            if !defined {
                let mut e = CountyEstimate::from_prob(p, f64::NAN, f64::NAN, bits | flags::UNDEFINED_VAR);
                e.var = f64::NAN;
                return e;
            }
            if var <= 0.0 {
                var = 0.0;
                bits |= flags::ZERO_VARIANCE;
            }
            CountyEstimate::from_prob(p, var, delta_logit_var(p, var), bits)
        })
        .collect();
    CountyEstimates { counties }
}

/// Delta-method variance of `logit(p)` given the probability-scale variance.
pub fn delta_logit_var(p: f64, var: f64) -> f64 {
    let d = p * (1.0 - p);
    var / (d * d)
}

/// Logit-scale direct estimates with an availability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitInput {
    pub z: Vec<f64>,
    pub v: Vec<f64>,
    pub available: Vec<bool>,
}

impl LogitInput {
    pub fn n_available(&self) -> usize {
        self.available.iter().filter(|&&a| a).count()
    }
}

/// Masks missing, boundary and undefined-variance counties; zero-variance
/// counties stay available with `v = 0`.
pub fn logit_transform(est: &CountyEstimates) -> LogitInput {
    let mut out = LogitInput { z: Vec::new(), v: Vec::new(), available: Vec::new() };
    for e in &est.counties {
        let ok = e.is_scorable() && e.logit_est.is_finite() && e.logit_var >= 0.0;
        out.z.push(if ok { e.logit_est } else { f64::NAN });
        out.v.push(if ok { e.logit_var } else { f64::NAN });
        out.available.push(ok);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::{DesignKind, SurveyCluster};

    fn cluster(county: usize, stratum: usize, y: u32, n: u32, w: f64) -> SurveyCluster {
        SurveyCluster {
            cluster_id: 0,
            ea: 0,
            county,
            stratum,
            urban: stratum % 2 == 0,
            x: 0.0,
            y: 0.0,
            y_c: y,
            n_c: n,
            households: 25,
            first_stage_prob: 1.0,
            child_weight: w,
            cluster_weight: w * n as f64,
        }
    }

    fn survey(clusters: Vec<SurveyCluster>, m: usize) -> SurveyDataset {
        SurveyDataset { kind: DesignKind::Stratified, n_counties: m, clusters, stratum_sizes: vec![2; 2 * m] }
    }

    #[test]
    fn naive_examples() {
        let e = naive_estimate(&survey(vec![cluster(0, 1, 3, 10, 1.0), cluster(0, 1, 1, 10, 1.0)], 2));
        let c = e.counties[0];
        assert!((c.estimate - 0.2).abs() < 1e-15);
        assert!((c.logit_var.sqrt() - 1.0 / (20.0f64 * 0.16).sqrt()).abs() < 1e-12);
        assert!(c.lower80 < c.estimate && c.estimate < c.upper80);
        assert_eq!(e.counties[1].flags, flags::MISSING);
        let z = naive_estimate(&survey(vec![cluster(0, 1, 0, 10, 1.0)], 1));
        assert_ne!(z.counties[0].flags & flags::BOUNDARY, 0);
        assert!(z.counties[0].lower80.is_nan());
    }

    #[test]
    fn direct_hajek_ratio() {
        let e = direct_estimate(
            &survey(vec![cluster(0, 1, 1, 2, 10.0), cluster(0, 1, 0, 2, 20.0)], 1),
            DirectOptions::default(),
        );
        assert!((e.counties[0].estimate - 10.0 / 60.0).abs() < 1e-15);
    }

    #[test]
    fn direct_flags() {
        let e = direct_estimate(
            &survey(vec![cluster(0, 0, 1, 5, 1.0), cluster(0, 1, 1, 5, 1.0), cluster(0, 1, 2, 5, 1.0)], 1),
            DirectOptions::default(),
        );
        assert_eq!(e.counties[0].flags, flags::SINGLE_CLUSTER_STRATUM);
        let u = direct_estimate(&survey(vec![cluster(0, 0, 1, 5, 1.0)], 1), DirectOptions::default());
        assert_ne!(u.counties[0].flags & flags::UNDEFINED_VAR, 0);
        assert!(!logit_transform(&u).available[0]);
    }

    #[test]
    fn logit_delta_method() {
        let e = CountyEstimates { counties: vec![CountyEstimate::from_prob(0.5, 0.0004, delta_logit_var(0.5, 0.0004), 0)] };
        let l = logit_transform(&e);
        assert_eq!(l.z[0], 0.0);
        assert!((l.v[0] - 0.0064).abs() < 1e-15);
        let d = direct_estimate(
            &survey(vec![cluster(0, 1, 1, 2, 1.0), cluster(0, 1, 3, 6, 1.0)], 1),
            DirectOptions::default(),
        );
        assert_ne!(d.counties[0].flags & flags::ZERO_VARIANCE, 0);
        let l = logit_transform(&d);
        assert!(l.available[0] && l.v[0] == 0.0);
    }

    #[test]
    fn flag_names_round_trip() {
        let bits = flags::BOUNDARY | flags::SINGLE_CLUSTER_STRATUM;
        assert_eq!(flags::parse(&flags::describe(bits)), Some(bits));
        assert_eq!(flags::parse(""), Some(0));
    }
}
