//! Gridded spatial domain: a population density raster partitioned into
//! rectangular counties, an urban mask obtained by thresholding density
//! within each county, and the rook-contiguity county graph.
//!
//! Cells are stored row-major with row 0 at the southern edge, so the centre
//! of cell `(row, col)` is `origin + cell_size * (col + 0.5, row + 0.5)`.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{bail, Error, Result};
use crate::rng::{self, labels};

/// Population density surface with a county id per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub nrows: usize,
    pub ncols: usize,
    pub cell_size: f64,
    pub origin: (f64, f64),
    pub values: Vec<f64>,
    pub county_id: Vec<usize>,
}

impl DensityGrid {
    /// Validates the grid invariants and returns it.
    pub fn new(
        nrows: usize,
        ncols: usize,
        cell_size: f64,
        origin: (f64, f64),
        values: Vec<f64>,
        county_id: Vec<usize>,
    ) -> Result<Self> {
        if nrows == 0 || ncols == 0 {
            bail!(Config, "grid must have at least one row and column");
        }
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            bail!(Config, "cell size must be positive, got {cell_size}");
        }
        let n = nrows * ncols;
        if values.len() != n || county_id.len() != n {
            bail!(
                Dimension,
                "grid of {nrows}x{ncols} needs {n} values and county ids, got {} and {}",
                values.len(),
                county_id.len()
            );
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            bail!(Domain, "cell {k} has invalid density {}", values[k]);
        }
        let grid = Self { nrows, ncols, cell_size, origin, values, county_id };
        let mass = grid.county_mass();
        let m = mass.len();
        if let Some(c) = (0..m).find(|&c| !(mass[c] > 0.0)) {
            bail!(Domain, "county {c} has no population mass (of {m} counties)");
        }
        Ok(grid)
    }

    pub fn n_cells(&self) -> usize {
        self.nrows * self.ncols
    }

    /// Number of counties, taken as one more than the largest id.
    pub fn n_counties(&self) -> usize {
        self.county_id.iter().max().map_or(0, |&c| c + 1)
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (row, col) = (cell / self.ncols, cell % self.ncols);
        (
            self.origin.0 + self.cell_size * (col as f64 + 0.5),
            self.origin.1 + self.cell_size * (row as f64 + 0.5),
        )
    }

    /// `(xmin, ymin, xmax, ymax)` of the gridded extent.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        (
            self.origin.0,
            self.origin.1,
            self.origin.0 + self.cell_size * self.ncols as f64,
            self.origin.1 + self.cell_size * self.nrows as f64,
        )
    }

    /// Diagonal length of the bounding box.
    pub fn diameter(&self) -> f64 {
        let (x0, y0, x1, y1) = self.bounding_box();
        (x1 - x0).hypot(y1 - y0)
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn county_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.n_counties()];
        for (v, &c) in self.values.iter().zip(&self.county_id) {
            mass[c] += v;
        }
        mass
    }

    /// Cell indices of each county in ascending order.
    pub fn county_cells(&self) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new(); self.n_counties()];
        for (k, &c) in self.county_id.iter().enumerate() {
            cells[c].push(k);
        }
        cells
    }
}

/// Rectangular arrangement of counties over the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountyLayout {
    pub county_rows: usize,
    pub county_cols: usize,
}

/// Log-Gaussian density surface built from random Fourier features of a
/// squared-exponential field: `ln q(x) = log_mean + log_sd * f(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityFieldParams {
    pub log_mean: f64,
    pub log_sd: f64,
    /// Correlation length of the log field in km.
    pub length_scale: f64,
    pub n_features: usize,
}

impl DensityFieldParams {
    pub fn constant(value: f64) -> Self {
        Self { log_mean: value.ln(), log_sd: 0.0, length_scale: 1.0, n_features: 0 }
    }
}

/// Builds a synthetic density grid of `nrows x ncols` cells whose counties are
/// equal rectangular blocks of the given layout.
pub fn build_county_grid(
    layout: CountyLayout,
    nrows: usize,
    ncols: usize,
    cell_size: f64,
    field: &DensityFieldParams,
    seed: u64,
) -> Result<DensityGrid> {
    let CountyLayout { county_rows, county_cols } = layout;
    if county_rows == 0 || county_cols == 0 || nrows % county_rows != 0 || ncols % county_cols != 0 {
        bail!(
            Config,
            "county layout {county_rows}x{county_cols} does not tile a {nrows}x{ncols} grid"
        );
    }
    if !field.log_mean.is_finite() || !(field.log_sd >= 0.0) {
        bail!(Config, "density field needs finite log mean and nonnegative log sd");
    }
    if field.log_sd > 0.0 && (!(field.length_scale > 0.0) || field.n_features == 0) {
        bail!(Config, "a random density field needs a positive length scale and features");
    }
    let (block_r, block_c) = (nrows / county_rows, ncols / county_cols);
    let mut rng = rng::rng_for(seed, &[labels::GRID]);
    let features: Vec<(f64, f64, f64)> = (0..field.n_features)
        .map(|_| {
            let wx: f64 = rng.sample::<f64, _>(StandardNormal) / field.length_scale;
            let wy: f64 = rng.sample::<f64, _>(StandardNormal) / field.length_scale;
            let phase = rng.random::<f64>() * core::f64::consts::TAU;
            (wx, wy, phase)
        })
        .collect();
    let amp = if field.n_features > 0 { (2.0 / field.n_features as f64).sqrt() } else { 0.0 };
    let mut values = Vec::with_capacity(nrows * ncols);
    let mut county_id = Vec::with_capacity(nrows * ncols);
    for row in 0..nrows {
        for col in 0..ncols {
            let x = cell_size * (col as f64 + 0.5);
            let y = cell_size * (row as f64 + 0.5);
            let f: f64 = features.iter().map(|&(wx, wy, b)| (wx * x + wy * y + b).cos()).sum::<f64>() * amp;
            values.push((field.log_mean + field.log_sd * f).exp());
            county_id.push((row / block_r) * county_cols + col / block_c);
        }
    }
    DensityGrid::new(nrows, ncols, cell_size, (0.0, 0.0), values, county_id)
}

/// Urban cells and the realized urban population fraction of each county.
#[derive(Debug, Clone, PartialEq)]
pub struct UrbanMask {
    pub urban: Vec<bool>,
    pub urban_fraction: Vec<f64>,
}

/// Marks, within each county, the densest cells whose cumulative mass first
/// reaches the target urban fraction. Ties in density go to the lower index.
pub fn threshold_urbanicity(grid: &DensityGrid, targets: &[f64]) -> Result<UrbanMask> {
    let m = grid.n_counties();
    if targets.len() != m {
        bail!(Dimension, "{} urban targets for {m} counties", targets.len());
    }
    if let Some(c) = targets.iter().position(|t| !(0.0..=1.0).contains(t)) {
        bail!(InvalidArgument, "urban target {} for county {c} is outside [0, 1]", targets[c]);
    }
    let mut urban = vec![false; grid.n_cells()];
    let mut urban_fraction = vec![0.0; m];
    for (c, mut cells) in grid.county_cells().into_iter().enumerate() {
        let total: f64 = cells.iter().map(|&k| grid.values[k]).sum();
        if !(total > 0.0) {
            bail!(Domain, "county {c} has zero population mass");
        }
        cells.sort_by(|&a, &b| grid.values[b].total_cmp(&grid.values[a]).then(a.cmp(&b)));
        let target = targets[c];
        let mut acc = 0.0;
        if target >= 1.0 {
            cells.iter().for_each(|&k| urban[k] = true);
            acc = total;
        } else {
            for &k in &cells {
                if acc >= target * total {
                    break;
                }
                urban[k] = true;
                acc += grid.values[k];
            }
        }
        urban_fraction[c] = acc / total;
    }
    Ok(UrbanMask { urban, urban_fraction })
}

/// Undirected county graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    pub m: usize,
    /// Edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub connected: bool,
}

impl AdjacencyGraph {
    /// Builds a graph from an edge list, normalizing orientation and dropping duplicates.
    pub fn from_edges(m: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut e = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= m || b >= m {
                bail!(InvalidArgument, "edge ({a}, {b}) references a county outside 0..{m}");
            }
            if a == b {
                bail!(InvalidArgument, "self-loop on county {a}");
            }
            e.push((a.min(b), a.max(b)));
        }
        e.sort_unstable();
        e.dedup();
        let mut g = Self { m, edges: e, connected: false };
        g.connected = g.components() <= 1;
        Ok(g)
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.m];
        for &(i, j) in &self.edges {
            nb[i].push(j);
            nb[j].push(i);
        }
        nb.iter_mut().for_each(|v| v.sort_unstable());
        nb
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors().iter().map(Vec::len).collect()
    }

    /// Number of connected components.
    pub fn components(&self) -> usize {
        let nb = self.neighbors();
        let mut seen = vec![false; self.m];
        let mut count = 0;
        for s in 0..self.m {
            if seen[s] {
                continue;
            }
            count += 1;
            seen[s] = true;
            let mut queue = VecDeque::from([s]);
            while let Some(v) = queue.pop_front() {
                for &w in &nb[v] {
                    if !seen[w] {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                }
            }
        }
        count
    }
}

/// Rook contiguity between counties. Fails if the graph is disconnected.
pub fn county_adjacency(grid: &DensityGrid) -> Result<AdjacencyGraph> {
    let mut edges = Vec::new();
    let id = |r: usize, c: usize| grid.county_id[r * grid.ncols + c];
    for r in 0..grid.nrows {
        for c in 0..grid.ncols {
            let a = id(r, c);
            if c + 1 < grid.ncols && id(r, c + 1) != a {
                edges.push((a, id(r, c + 1)));
            }
            if r + 1 < grid.nrows && id(r + 1, c) != a {
                edges.push((a, id(r + 1, c)));
            }
        }
    }
    let g = AdjacencyGraph::from_edges(grid.n_counties(), &edges)?;
    if !g.connected {
        return Err(Error::Disconnected { components: g.components() });
    }
    Ok(g)
}
