//! File formats: ESRI ASCII rasters and the CSV schemas.
//!
//! | file | columns |
//! |------|---------|
//! | frame | `ea,county,urban,cell,x,y,households,children` |
//! | truth | `county,children,events,prevalence,urban_children,urban_prevalence,rural_children,rural_prevalence` |
//! | survey | `cluster_id,design,ea,county,stratum,urban,x,y,y_c,n_c,households,first_stage_prob,child_weight,cluster_weight` |
//! | estimates | `scenario,design,model,replicate,county,estimate,var,logit_est,logit_var,lower80,upper80,flags` |
//! | county draws | `model,replicate,county,draw,value` |
//! | latent draws | `draw,theta_index,<hyperparameter names>,x0,x1,...` |
//! | stratum metadata | `county,C_iU,C_iR,E_U,E_R,q_U` |
//! | scores | `model,bias_e4,var_e5,mse_e4,crps_e3,cvg80_e2,width_e2,replicates,scored,excluded` |
//! | parameters | `model,parameter,est,sd,q10,q50,q90,replicates` |
//! | plot data | `scenario,design,model,metric,value` |
//!
//! Booleans are written as 0/1, undefined values as `NaN`, and flags as
//! `|`-joined names (empty when none).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use saelab_core::aggregate::StratumMeta;
use saelab_core::design::{flags, CountyEstimate, CountyEstimates};
use saelab_core::geodata::DensityGrid;
use saelab_core::inference::Draws;
use saelab_core::models::ParamSummary;
use saelab_core::popgen::{PopulationFrame, TruthTable};
use saelab_core::scoring::ScoreRow;
use saelab_core::survey::{DesignKind, SurveyCluster, SurveyDataset};

use crate::error::{io_err, LabError, Result};

/// A raster in ESRI ASCII grid layout. `values` are row-major with row 0 at
/// the southern edge (the file itself lists the northern row first).
#[derive(Debug, Clone, PartialEq)]
pub struct AsciiRaster {
    pub ncols: usize,
    pub nrows: usize,
    pub xll: f64,
    pub yll: f64,
    pub cell_size: f64,
    pub nodata: f64,
    pub values: Vec<f64>,
}

fn format_err(path: &Path, message: impl Into<String>) -> LabError {
    LabError::Format { path: path.to_path_buf(), message: message.into() }
}

pub fn read_ascii_raster(path: &Path) -> Result<AsciiRaster> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut header = std::collections::BTreeMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let first = line.split_whitespace().next().unwrap_or_default();
        if rows.is_empty() && first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or_default().to_ascii_lowercase();
            let value: f64 = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format_err(path, format!("bad header line '{line}'")))?;
            header.insert(key, value);
        } else {
            let row: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
            rows.push(row.map_err(|_| format_err(path, format!("bad raster row '{line}'")))?);
        }
    }
    let get = |k: &str| header.get(k).copied().ok_or_else(|| format_err(path, format!("missing header '{k}'")));
    let ncols = get("ncols")? as usize;
    let nrows = get("nrows")? as usize;
    let cell_size = get("cellsize")?;
    let xll = get("xllcorner")?;
    let yll = get("yllcorner")?;
    let nodata = header.get("nodata_value").copied().unwrap_or(-9999.0);
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(format_err(path, format!("expected {nrows} rows of {ncols} values")));
    }
    let values = rows.into_iter().rev().flatten().collect();
    Ok(AsciiRaster { ncols, nrows, xll, yll, cell_size, nodata, values })
}

pub fn write_ascii_raster(path: &Path, r: &AsciiRaster) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut text = format!(
        "ncols {}\nnrows {}\nxllcorner {}\nyllcorner {}\ncellsize {}\nNODATA_value {}\n",
        r.ncols, r.nrows, r.xll, r.yll, r.cell_size, r.nodata
    );
    for row in (0..r.nrows).rev() {
        let line: Vec<String> = r.values[row * r.ncols..(row + 1) * r.ncols].iter().map(|v| v.to_string()).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Density, county-id and urban-indicator rasters of a grid.
pub fn grid_rasters(grid: &DensityGrid, urban: &[bool]) -> [AsciiRaster; 3] {
    let base = |values: Vec<f64>| AsciiRaster {
        ncols: grid.ncols,
        nrows: grid.nrows,
        xll: grid.origin.0,
        yll: grid.origin.1,
        cell_size: grid.cell_size,
        nodata: -9999.0,
        values,
    };
    [
        base(grid.values.clone()),
        base(grid.county_id.iter().map(|&c| c as f64).collect()),
        base(urban.iter().map(|&u| u as u8 as f64).collect()),
    ]
}

pub fn grid_from_rasters(density: &Path, county: &Path) -> Result<DensityGrid> {
    let d = read_ascii_raster(density)?;
    let c = read_ascii_raster(county)?;
    if (d.ncols, d.nrows) != (c.ncols, c.nrows) || d.cell_size != c.cell_size || (d.xll, d.yll) != (c.xll, c.yll) {
        return Err(format_err(county, "county raster does not align with the density raster"));
    }
    if d.values.iter().any(|&v| v == d.nodata || !(v >= 0.0)) {
        return Err(format_err(density, "density raster needs nonnegative values in every cell"));
    }
    let ids: Option<Vec<usize>> =
        c.values.iter().map(|&v| (v >= 0.0 && v.fract() == 0.0 && v != c.nodata).then_some(v as usize)).collect();
    let ids = ids.ok_or_else(|| format_err(county, "county ids must be nonnegative integers in every cell"))?;
    Ok(DensityGrid::new(d.nrows, d.ncols, d.cell_size, (d.xll, d.yll), d.values, ids)?)
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(LabError::from)
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::Reader::from_path(path).map_err(LabError::from)
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = reader(path)?;
    r.deserialize().map(|row| row.map_err(LabError::from)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRow {
    ea: usize,
    county: usize,
    urban: u8,
    cell: usize,
    x: f64,
    y: f64,
    households: u32,
    children: u32,
}

pub fn write_frame(path: &Path, frame: &PopulationFrame) -> Result<()> {
    let rows = frame.eas.iter().enumerate().map(|(k, e)| FrameRow {
        ea: k,
        county: e.county,
        urban: e.urban as u8,
        cell: e.cell,
        x: e.x,
        y: e.y,
        households: e.households,
        children: e.children,
    });
    write_rows(path, rows, &["ea", "county", "urban", "cell", "x", "y", "households", "children"])
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TruthRow {
    pub county: usize,
    pub children: u64,
    pub events: u64,
    pub prevalence: f64,
    pub urban_children: u64,
    pub urban_prevalence: f64,
    pub rural_children: u64,
    pub rural_prevalence: f64,
}

pub fn write_truth(path: &Path, truth: &TruthTable) -> Result<()> {
    let rows = (0..truth.county.len()).map(|c| TruthRow {
        county: c,
        children: truth.county_children[c],
        events: truth.county_events[c],
        prevalence: truth.county[c],
        urban_children: truth.stratum_children[2 * c],
        urban_prevalence: truth.stratum[2 * c],
        rural_children: truth.stratum_children[2 * c + 1],
        rural_prevalence: truth.stratum[2 * c + 1],
    });
    write_rows(
        path,
        rows,
        &[
            "county",
            "children",
            "events",
            "prevalence",
            "urban_children",
            "urban_prevalence",
            "rural_children",
            "rural_prevalence",
        ],
    )
}

/// County prevalences from a truth file.
pub fn read_truth(path: &Path) -> Result<Vec<f64>> {
    let rows: Vec<TruthRow> = read_rows(path)?;
    for (i, r) in rows.iter().enumerate() {
        if r.county != i {
            return Err(format_err(path, "truth rows must list counties 0, 1, ... in order"));
        }
    }
    Ok(rows.into_iter().map(|r| r.prevalence).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct SurveyRow {
    cluster_id: usize,
    design: String,
    ea: usize,
    county: usize,
    stratum: usize,
    urban: u8,
    x: f64,
    y: f64,
    y_c: u32,
    n_c: u32,
    households: u32,
    first_stage_prob: f64,
    child_weight: f64,
    cluster_weight: f64,
}

const SURVEY_HEADER: [&str; 14] = [
    "cluster_id",
    "design",
    "ea",
    "county",
    "stratum",
    "urban",
    "x",
    "y",
    "y_c",
    "n_c",
    "households",
    "first_stage_prob",
    "child_weight",
    "cluster_weight",
];

pub fn write_survey(path: &Path, survey: &SurveyDataset) -> Result<()> {
    let rows = survey.clusters.iter().map(|c| SurveyRow {
        cluster_id: c.cluster_id,
        design: survey.kind.to_string(),
        ea: c.ea,
        county: c.county,
        stratum: c.stratum,
        urban: c.urban as u8,
        x: c.x,
        y: c.y,
        y_c: c.y_c,
        n_c: c.n_c,
        households: c.households,
        first_stage_prob: c.first_stage_prob,
        child_weight: c.child_weight,
        cluster_weight: c.cluster_weight,
    });
    write_rows(path, rows, &SURVEY_HEADER)
}

/// Reads a survey; county count and stratum sizes come from the frame.
pub fn read_survey(path: &Path, frame: &PopulationFrame) -> Result<SurveyDataset> {
    let rows: Vec<SurveyRow> = read_rows(path)?;
    let kind: DesignKind = match rows.first() {
        Some(r) => r.design.parse()?,
        None => return Err(format_err(path, "survey has no clusters")),
    };
    let mut clusters = Vec::with_capacity(rows.len());
    for r in rows {
        if r.design.parse::<DesignKind>()? != kind {
            return Err(format_err(path, "survey mixes designs"));
        }
        if r.county >= frame.n_counties || r.stratum != 2 * r.county + (r.urban == 0) as usize {
            return Err(format_err(path, format!("cluster {} has inconsistent county and stratum", r.cluster_id)));
        }
        if r.y_c > r.n_c {
            return Err(format_err(path, format!("cluster {} has more events than children", r.cluster_id)));
        }
        clusters.push(SurveyCluster {
            cluster_id: r.cluster_id,
            ea: r.ea,
            county: r.county,
            stratum: r.stratum,
            urban: r.urban != 0,
            x: r.x,
            y: r.y,
            y_c: r.y_c,
            n_c: r.n_c,
            households: r.households,
            first_stage_prob: r.first_stage_prob,
            child_weight: r.child_weight,
            cluster_weight: r.cluster_weight,
        });
    }
    Ok(SurveyDataset {
        kind,
        n_counties: frame.n_counties,
        clusters,
        stratum_sizes: frame.strata.iter().map(Vec::len).collect(),
    })
}

/// Identifies a set of county estimates within a file.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EstimateKey {
    pub scenario: String,
    pub design: String,
    pub model: String,
    pub replicate: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateRow {
    scenario: String,
    design: String,
    model: String,
    replicate: usize,
    county: usize,
    estimate: f64,
    var: f64,
    logit_est: f64,
    logit_var: f64,
    lower80: f64,
    upper80: f64,
    flags: String,
}

const ESTIMATE_HEADER: [&str; 12] = [
    "scenario",
    "design",
    "model",
    "replicate",
    "county",
    "estimate",
    "var",
    "logit_est",
    "logit_var",
    "lower80",
    "upper80",
    "flags",
];

pub fn write_estimates(path: &Path, sets: &[(EstimateKey, CountyEstimates)]) -> Result<()> {
    let rows = sets.iter().flat_map(|(k, est)| {
        est.counties.iter().enumerate().map(move |(i, e)| EstimateRow {
            scenario: k.scenario.clone(),
            design: k.design.clone(),
            model: k.model.clone(),
            replicate: k.replicate,
            county: i,
            estimate: e.estimate,
            var: e.var,
            logit_est: e.logit_est,
            logit_var: e.logit_var,
            lower80: e.lower80,
            upper80: e.upper80,
            flags: flags::describe(e.flags),
        })
    });
    write_rows(path, rows, &ESTIMATE_HEADER)
}

/// Reads estimate sets in file order; counties must be listed 0, 1, ...
/// within each set.
pub fn read_estimates(path: &Path) -> Result<Vec<(EstimateKey, CountyEstimates)>> {
    let rows: Vec<EstimateRow> = read_rows(path)?;
    let mut out: Vec<(EstimateKey, CountyEstimates)> = Vec::new();
    for r in rows {
        let key =
            EstimateKey { scenario: r.scenario, design: r.design, model: r.model, replicate: r.replicate };
        let bits =
            flags::parse(&r.flags).ok_or_else(|| format_err(path, format!("unknown flags '{}'", r.flags)))?;
        let e = CountyEstimate {
            estimate: r.estimate,
            var: r.var,
            logit_est: r.logit_est,
            logit_var: r.logit_var,
            lower80: r.lower80,
            upper80: r.upper80,
            flags: bits,
        };
        match out.last_mut() {
            Some((k, set)) if *k == key => {
                if r.county != set.counties.len() {
                    return Err(format_err(path, "counties of an estimate set must be consecutive from 0"));
                }
                set.counties.push(e);
            }
            _ => {
                if r.county != 0 {
                    return Err(format_err(path, "counties of an estimate set must be consecutive from 0"));
                }
                out.push((key, CountyEstimates { counties: vec![e] }));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct CountyDrawRow {
    model: String,
    replicate: usize,
    county: usize,
    draw: usize,
    value: f64,
}

/// Writes `draws[county][j]` in long format.
pub fn write_county_draws(path: &Path, model: &str, replicate: usize, draws: &[Vec<f64>]) -> Result<()> {
    let rows = draws.iter().enumerate().flat_map(|(i, d)| {
        d.iter().enumerate().map(move |(j, &v)| CountyDrawRow {
            model: model.to_string(),
            replicate,
            county: i,
            draw: j,
            value: v,
        })
    });
    write_rows(path, rows, &["model", "replicate", "county", "draw", "value"])
}

/// Reads county draws grouped by `(model, replicate)` as `draws[county][j]`.
pub fn read_county_draws(path: &Path) -> Result<std::collections::BTreeMap<(String, usize), Vec<Vec<f64>>>> {
    let rows: Vec<CountyDrawRow> = read_rows(path)?;
    let mut out: std::collections::BTreeMap<(String, usize), Vec<Vec<f64>>> = Default::default();
    for r in rows {
        let set = out.entry((r.model, r.replicate)).or_default();
        if set.len() <= r.county {
            set.resize(r.county + 1, Vec::new());
        }
        if set[r.county].len() != r.draw {
            return Err(format_err(path, "draws of a county must be consecutive from 0"));
        }
        set[r.county].push(r.value);
    }
    Ok(out)
}

pub fn write_latent_draws(path: &Path, hyper_names: &[String], draws: &Draws) -> Result<()> {
    let mut w = writer(path)?;
    let n_latent = draws.latent.first().map_or(0, Vec::len);
    let mut header = vec!["draw".to_string(), "theta_index".to_string()];
    header.extend(hyper_names.iter().cloned());
    header.extend((0..n_latent).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for j in 0..draws.n_draws() {
        let mut rec = vec![j.to_string(), draws.theta_index[j].to_string()];
        rec.extend(draws.theta[j].iter().map(|v| v.to_string()));
        rec.extend(draws.latent[j].iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_latent_draws(path: &Path, n_hyper: usize, n_latent: usize) -> Result<Draws> {
    let mut r = reader(path)?;
    let width = 2 + n_hyper + n_latent;
    if r.headers()?.len() != width {
        return Err(format_err(path, format!("expected {width} columns for this model")));
    }
    let mut draws = Draws { latent: Vec::new(), theta: Vec::new(), theta_index: Vec::new() };
    for rec in r.records() {
        let rec = rec?;
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().skip(2).map(str::parse).collect();
        let vals = vals.map_err(|_| format_err(path, "non-numeric draw value"))?;
        let idx = rec[1].parse().map_err(|_| format_err(path, "bad theta index"))?;
        draws.theta_index.push(idx);
        draws.theta.push(vals[..n_hyper].to_vec());
        draws.latent.push(vals[n_hyper..].to_vec());
    }
    Ok(draws)
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRow {
    county: usize,
    #[serde(rename = "C_iU")]
    c_u: usize,
    #[serde(rename = "C_iR")]
    c_r: usize,
    #[serde(rename = "E_U")]
    e_u: f64,
    #[serde(rename = "E_R")]
    e_r: f64,
    #[serde(rename = "q_U")]
    q_u: f64,
}

pub fn write_stratum_meta(path: &Path, meta: &StratumMeta) -> Result<()> {
    let rows = (0..meta.n_counties()).map(|c| MetaRow {
        county: c,
        c_u: meta.eas[c][0],
        c_r: meta.eas[c][1],
        e_u: meta.expected[c][0],
        e_r: meta.expected[c][1],
        q_u: meta.urban_fraction[c],
    });
    write_rows(path, rows, &["county", "C_iU", "C_iR", "E_U", "E_R", "q_U"])
}

pub fn read_stratum_meta(path: &Path, n_counties: usize) -> Result<StratumMeta> {
    let rows: Vec<MetaRow> = read_rows(path)?;
    if rows.len() != n_counties || rows.iter().enumerate().any(|(i, r)| r.county != i) {
        return Err(format_err(path, format!("expected counties 0..{n_counties} in order")));
    }
    let meta = StratumMeta {
        eas: rows.iter().map(|r| [r.c_u, r.c_r]).collect(),
        expected: rows.iter().map(|r| [r.e_u, r.e_r]).collect(),
        urban_fraction: rows.iter().map(|r| r.q_u).collect(),
    };
    meta.validate()?;
    Ok(meta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCsvRow {
    pub model: String,
    pub bias_e4: f64,
    pub var_e5: f64,
    pub mse_e4: f64,
    pub crps_e3: f64,
    pub cvg80_e2: f64,
    pub width_e2: f64,
    pub replicates: usize,
    pub scored: usize,
    pub excluded: usize,
}

impl ScoreCsvRow {
    pub const METRICS: [&'static str; 6] = ["bias_e4", "var_e5", "mse_e4", "crps_e3", "cvg80_e2", "width_e2"];

    pub fn from_score(row: &ScoreRow) -> Self {
        let s = row.scaled();
        Self {
            model: row.model.clone(),
            bias_e4: s[0],
            var_e5: s[1],
            mse_e4: s[2],
            crps_e3: s[3],
            cvg80_e2: s[4],
            width_e2: s[5],
            replicates: row.n_replicates,
            scored: row.n_scored,
            excluded: row.n_excluded,
        }
    }

    pub fn metrics(&self) -> [f64; 6] {
        [self.bias_e4, self.var_e5, self.mse_e4, self.crps_e3, self.cvg80_e2, self.width_e2]
    }
}

const SCORE_HEADER: [&str; 10] =
    ["model", "bias_e4", "var_e5", "mse_e4", "crps_e3", "cvg80_e2", "width_e2", "replicates", "scored", "excluded"];

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    write_rows(path, rows.iter().map(ScoreCsvRow::from_score), &SCORE_HEADER)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreCsvRow>> {
    read_rows(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCsvRow {
    pub model: String,
    pub parameter: String,
    pub est: f64,
    pub sd: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    pub replicates: usize,
}

pub fn write_params(path: &Path, rows: &[(String, ParamSummary, usize)]) -> Result<()> {
    let rows = rows.iter().map(|(model, p, n)| ParamCsvRow {
        model: model.clone(),
        parameter: p.name.clone(),
        est: p.mean,
        sd: p.sd,
        q10: p.q10,
        q50: p.q50,
        q90: p.q90,
        replicates: *n,
    });
    write_rows(path, rows, &["model", "parameter", "est", "sd", "q10", "q50", "q90", "replicates"])
}

pub fn read_params(path: &Path) -> Result<Vec<ParamCsvRow>> {
    read_rows(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub scenario: String,
    pub design: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_plot_rows(path: &Path, rows: &[PlotRow]) -> Result<()> {
    write_rows(path, rows, &["scenario", "design", "model", "metric", "value"])
}

pub fn read_plot_rows(path: &Path) -> Result<Vec<PlotRow>> {
    read_rows(path)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}
