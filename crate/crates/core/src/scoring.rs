//! Scoring rules for county predictions: bias, across-replicate variance,
//! MSE, CRPS, 80% interval coverage and width.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::design::CountyEstimates;
use crate::error::{bail, Result};
use crate::math::sorted_copy;

/// Number of deterministic predictive quantiles used for the CRPS of
/// estimators that report only a normal logit-scale approximation.
pub const DEFAULT_PREDICTIVE_DRAWS: usize = 1000;

/// `sum_{k=0}^{n} (F(k/n) - 1{k >= y})^2` for a CDF given on `k/n`.
pub fn crps_discrete(cdf: &[f64], y: usize, n: usize) -> Result<f64> {
    if cdf.len() != n + 1 {
        bail!(Dimension, "CDF has {} points, expected {}", cdf.len(), n + 1);
    }
    if y > n {
        bail!(InvalidArgument, "outcome {y} exceeds {n}");
    }
    let tol = 1e-12;
    if cdf.iter().any(|f| !(-tol..=1.0 + tol).contains(f)) || cdf.windows(2).any(|w| w[1] < w[0] - tol) {
        bail!(Domain, "CDF values must be nondecreasing in [0, 1]");
    }
    if (cdf[n] - 1.0).abs() > tol {
        bail!(Domain, "CDF must reach 1 at the upper end, got {}", cdf[n]);
    }
    Ok(cdf.iter().enumerate().map(|(k, f)| (f - if k >= y { 1.0 } else { 0.0 }).powi(2)).sum())
}

/// `mean|X - y| - mean|X - X'| / 2` over all ordered draw pairs, computed
/// from the sorted draws.
pub fn crps_draws(draws: &[f64], truth: f64) -> Result<f64> {
    if draws.is_empty() {
        bail!(InvalidArgument, "CRPS needs at least one draw");
    }
    let m = draws.len() as f64;
    let s = sorted_copy(draws);
    let abs_dev = s.iter().map(|x| (x - truth).abs()).sum::<f64>() / m;
    let spread = 2.0 / (m * m) * s.iter().enumerate().map(|(i, x)| (2.0 * i as f64 + 1.0 - m) * x).sum::<f64>();
    Ok((abs_dev - 0.5 * spread).max(0.0))
}

/// One replicate's county predictions and the truth they target.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicatePrediction {
    pub estimates: CountyEstimates,
    /// Predictive draws per county; when absent the CRPS uses the normal
    /// logit-scale approximation of each estimate.
    pub draws: Option<Vec<Vec<f64>>>,
    pub truth: Vec<f64>,
}

/// Scores averaged over counties and replicates (raw, unscaled values).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub model: String,
    pub bias: f64,
    pub var: f64,
    pub mse: f64,
    pub crps: f64,
    pub coverage80: f64,
    pub width80: f64,
    pub n_replicates: usize,
    /// County-replicate pairs skipped because the estimate was flagged.
    pub n_excluded: usize,
    /// County-replicate pairs scored.
    pub n_scored: usize,
}

impl ScoreRow {
    pub const HEADER: [&'static str; 7] = ["model", "bias_e4", "var_e5", "mse_e4", "crps_e3", "cvg80_e2", "width_e2"];
    pub const SCALES: [f64; 6] = [1e4, 1e5, 1e4, 1e3, 1e2, 1e2];

    /// Metrics in table units: bias x1e4, var x1e5, MSE x1e4, CRPS x1e3,
    /// coverage and width x1e2.
    pub fn scaled(&self) -> [f64; 6] {
        let raw = [self.bias, self.var, self.mse, self.crps, self.coverage80, self.width80];
        let mut out = [0.0; 6];
        for k in 0..6 {
            out[k] = raw[k] * Self::SCALES[k];
        }
        out
    }
}

/// Scores one model over replicates.
///
/// Bias, MSE, CRPS, coverage and width are means over scorable
/// county-replicate pairs; the variance is the across-replicate sample
/// variance of each county's estimates, averaged over counties with at
/// least two scorable replicates.
pub fn score_table(model: &str, replicates: &[ReplicatePrediction]) -> Result<ScoreRow> {
    let m = match replicates.first() {
        Some(r) => r.truth.len(),
        None => bail!(InvalidArgument, "no replicates to score for {model}"),
    };
    let mut per_county: Vec<Vec<f64>> = vec![Vec::new(); m];
    let (mut bias, mut mse, mut crps, mut cover, mut width) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut n_scored, mut n_excluded) = (0usize, 0usize);
    for (r, rep) in replicates.iter().enumerate() {
        if rep.truth.len() != m || rep.estimates.len() != m {
            bail!(Dimension, "replicate {r} of {model} covers a different set of counties");
        }
        if let Some(d) = &rep.draws {
            if d.len() != m {
                bail!(Dimension, "replicate {r} of {model} has draws for {} counties", d.len());
            }
        }
        for i in 0..m {
            let e = &rep.estimates.counties[i];
            let t = rep.truth[i];
            if !e.is_scorable() || !t.is_finite() {
                n_excluded += 1;
                continue;
            }
            let err = e.estimate - t;
            bias += err;
            mse += err * err;
            cover += (e.lower80 <= t && t <= e.upper80) as u8 as f64;
            width += e.upper80 - e.lower80;
            crps += match &rep.draws {
                Some(d) => crps_draws(&d[i], t)?,
                None => crps_draws(&e.predictive_draws(DEFAULT_PREDICTIVE_DRAWS), t)?,
            };
            per_county[i].push(e.estimate);
            n_scored += 1;
        }
    }
    let k = n_scored as f64;
    let vars: Vec<f64> = per_county.iter().filter(|v| v.len() > 1).map(|v| crate::math::sample_variance(v)).collect();
    let avg = |s: f64| if n_scored > 0 { s / k } else { f64::NAN };
    Ok(ScoreRow {
        model: model.into(),
        bias: avg(bias),
        var: if vars.is_empty() { f64::NAN } else { vars.iter().sum::<f64>() / vars.len() as f64 },
        mse: avg(mse),
        crps: avg(crps),
        coverage80: avg(cover),
        width80: avg(width),
        n_replicates: replicates.len(),
        n_excluded,
        n_scored,
    })
}
