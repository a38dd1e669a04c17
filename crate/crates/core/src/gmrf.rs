//! Gaussian Markov random fields: the scaled intrinsic CAR structure, the
//! SPDE finite-element precision on a regular triangulation, linear
//! constraints handled by conditioning by kriging, and sampling.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Error, Result};
use crate::geodata::AdjacencyGraph;
use crate::rng::{self, labels};
use crate::sparse::{CholeskyFactor, CscMatrix, SymbolicCholesky};

/// Intrinsic CAR structure scaled so the geometric mean of the constrained
/// marginal variances is one.
#[derive(Debug, Clone)]
pub struct ScaledIcar {
    pub m: usize,
    /// Unscaled structure: degree on the diagonal, -1 for neighbours.
    pub structure: CscMatrix,
    /// Multiplier `c` such that `c * structure` is the scaled precision.
    pub scale: f64,
    /// Eigenvalues of the generalized inverse of the scaled structure
    /// (ascending, the first is zero).
    pub eigenvalues: Vec<f64>,
    /// Diagonal of the generalized inverse of the scaled structure.
    pub marginal_variances: Vec<f64>,
}

impl ScaledIcar {
    pub fn scaled_structure(&self) -> CscMatrix {
        self.structure.scaled(self.scale)
    }
}

/// Dense generalized inverse of an ICAR structure with a one-dimensional
/// constant null space: `(R + J/m)^-1 - J/m`.
pub fn icar_generalized_inverse(structure: &CscMatrix) -> Result<DMatrix<f64>> {
    let m = structure.nrows();
    let j = 1.0 / m as f64;
    let shifted = structure.to_dense().add_scalar(j);
    let chol = shifted
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite { pivot: 0 })?;
    Ok(chol.inverse().add_scalar(-j))
}

/// Builds the scaled ICAR model for a connected graph with at least two nodes.
pub fn icar_scaled(graph: &AdjacencyGraph) -> Result<ScaledIcar> {
    let m = graph.m;
    if m < 2 {
        bail!(InvalidArgument, "ICAR needs at least two areas, got {m}");
    }
    if !graph.connected {
        return Err(Error::Disconnected { components: graph.components() });
    }
    let deg = graph.degrees();
    let mut t: Vec<(usize, usize, f64)> = (0..m).map(|i| (i, i, deg[i] as f64)).collect();
    for &(i, j) in &graph.edges {
        t.push((i, j, -1.0));
        t.push((j, i, -1.0));
    }
    let structure = CscMatrix::from_triplets(m, m, &t);
    let ginv = icar_generalized_inverse(&structure)?;
    let mean_log = (0..m).map(|i| ginv[(i, i)].ln()).sum::<f64>() / m as f64;
    let scale = mean_log.exp();
    let scaled_inv = ginv / scale;
    let marginal_variances = (0..m).map(|i| scaled_inv[(i, i)]).collect();
    let mut eigenvalues: Vec<f64> = scaled_inv.symmetric_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    let top = eigenvalues[m - 1];
    for g in eigenvalues.iter_mut() {
        if g.abs() < 1e-10 * top {
            *g = 0.0;
        }
    }
    Ok(ScaledIcar { m, structure, scale, eigenvalues, marginal_variances })
}

/// Hard linear constraints `A x = e` with dense rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraints {
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

impl LinearConstraints {
    pub fn new(rows: Vec<Vec<f64>>, rhs: Vec<f64>) -> Self {
        assert_eq!(rows.len(), rhs.len());
        Self { rows, rhs }
    }

    /// `sum(x[range]) = 0`.
    pub fn sum_to_zero(n: usize, range: core::ops::Range<usize>) -> Self {
        let mut row = vec![0.0; n];
        row[range].iter_mut().for_each(|v| *v = 1.0);
        Self { rows: vec![row], rhs: vec![0.0] }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn append(&mut self, other: &LinearConstraints) {
        self.rows.extend(other.rows.iter().cloned());
        self.rhs.extend(other.rhs.iter().copied());
    }

    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(a, e)| a.iter().zip(x).map(|(u, v)| u * v).sum::<f64>() - e)
            .collect()
    }

    /// `A^T A` as sparse triplets.
    pub fn gram_triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::new();
        for row in &self.rows {
            let nz: Vec<(usize, f64)> =
                row.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
            for &(i, a) in &nz {
                for &(j, b) in &nz {
                    t.push((i, j, a * b));
                }
            }
        }
        t
    }

    /// `ln det(A A^T)`.
    pub fn log_det_aat(&self) -> Result<f64> {
        let k = self.len();
        let aat = DMatrix::from_fn(k, k, |i, j| {
            self.rows[i].iter().zip(&self.rows[j]).map(|(a, b)| a * b).sum::<f64>()
        });
        dense_log_det(aat)
    }
}

pub(crate) fn dense_log_det(m: DMatrix<f64>) -> Result<f64> {
    let chol = m.cholesky().ok_or(Error::NotPositiveDefinite { pivot: 0 })?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Conditioning by kriging for a Gaussian with precision factor `F` and
/// constraints `A x = e`: `x <- x - W S^-1 (A x - e)` with `W = F^-1 A^T`
/// and `S = A W`.
#[derive(Debug, Clone)]
pub struct KrigingCorrection {
    constraints: LinearConstraints,
    w: Vec<Vec<f64>>,
    s_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_det_s: f64,
}

impl KrigingCorrection {
    pub fn new(factor: &CholeskyFactor, constraints: &LinearConstraints) -> Result<Self> {
        let k = constraints.len();
        let w: Vec<Vec<f64>> = constraints.rows.iter().map(|a| factor.solve(a)).collect();
        let s = DMatrix::from_fn(k, k, |i, j| {
            constraints.rows[i].iter().zip(&w[j]).map(|(a, b)| a * b).sum::<f64>()
        });
        let s = (&s + s.transpose()) * 0.5;
        let s_chol = s.cholesky().ok_or(Error::NotPositiveDefinite { pivot: 0 })?;
        let log_det_s = 2.0 * s_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { constraints: constraints.clone(), w, s_chol, log_det_s })
    }

    /// `ln det(A F^-1 A^T)`.
    pub fn log_det_s(&self) -> f64 {
        self.log_det_s
    }

    pub fn constraints(&self) -> &LinearConstraints {
        &self.constraints
    }

    /// Projects `x` onto the constraint set along the kriging direction.
    pub fn apply(&self, x: &mut [f64]) {
        let r = DVector::from_vec(self.constraints.residual(x));
        let t = self.s_chol.solve(&r);
        for (wj, tj) in self.w.iter().zip(t.iter()) {
            for (xi, wi) in x.iter_mut().zip(wj) {
                *xi -= wi * tj;
            }
        }
        // A second pass removes rounding left by the first.
        let r = DVector::from_vec(self.constraints.residual(x));
        let t = self.s_chol.solve(&r);
        for (wj, tj) in self.w.iter().zip(t.iter()) {
            for (xi, wi) in x.iter_mut().zip(wj) {
                *xi -= wi * tj;
            }
        }
    }
}

/// Symmetric sparse precision with optional hard linear constraints.
#[derive(Debug, Clone)]
pub struct SparsePrecision {
    pub q: CscMatrix,
    pub constraints: Option<LinearConstraints>,
}

impl SparsePrecision {
    /// Precision used for factorization: `Q + A^T A` when constrained, which is
    /// proper for intrinsic fields and leaves the constrained density unchanged.
    pub fn factorizable(&self) -> CscMatrix {
        match &self.constraints {
            None => self.q.clone(),
            Some(c) => {
                let n = self.q.nrows();
                self.q.add(&CscMatrix::from_triplets(n, n, &c.gram_triplets()), 1.0, 1.0)
            }
        }
    }
}

/// Draws from `N(0, Q^-1)` conditioned on any constraints. Each draw uses its
/// own RNG stream derived from `(seed, draw index)`.
pub fn sample_gmrf(precision: &SparsePrecision, n_draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let factor = CholeskyFactor::new(&precision.factorizable())?;
    let kriging = match &precision.constraints {
        Some(c) if !c.is_empty() => Some(KrigingCorrection::new(&factor, c)?),
        _ => None,
    };
    let n = factor.dim();
    Ok((0..n_draws)
        .map(|d| {
            let mut rng = rng::rng_for(seed, &[labels::DRAWS, d as u64]);
            let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut x = factor.sample_with(&z);
            if let Some(k) = &kriging {
                k.apply(&mut x);
            }
            x
        })
        .collect())
}

/// Matérn parameters for smoothness one in two dimensions from the effective
/// range and marginal standard deviation: `kappa = sqrt(8)/range`,
/// `tau = 1/(4 pi kappa^2 sigma^2)`.
pub fn matern_params(range: f64, sigma: f64) -> Result<(f64, f64)> {
    if !(range > 0.0) || !(sigma > 0.0) || !range.is_finite() || !sigma.is_finite() {
        bail!(InvalidArgument, "range and sigma must be positive, got {range} and {sigma}");
    }
    let kappa = 8f64.sqrt() / range;
    let tau = 1.0 / (4.0 * core::f64::consts::PI * kappa * kappa * sigma * sigma);
    Ok((kappa, tau))
}

/// Layout of a regular triangulated lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularLayout {
    pub x0: f64,
    pub y0: f64,
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
}

/// Triangulation of the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<(f64, f64)>,
    pub triangles: Vec<[usize; 3]>,
    pub regular: Option<RegularLayout>,
}

impl Mesh {
    /// Regular lattice covering `[xmin - buffer, xmax + buffer] x [ymin - buffer, ymax + buffer]`
    /// with spacing at most `h`; every square is split along its rising diagonal.
    pub fn regular(bbox: (f64, f64, f64, f64), buffer: f64, h: f64) -> Result<Self> {
        let (xmin, ymin, xmax, ymax) = bbox;
        if !(h > 0.0) || !(buffer >= 0.0) || !(xmax > xmin) || !(ymax > ymin) {
            bail!(InvalidArgument, "invalid mesh extent or spacing");
        }
        let (x0, y0) = (xmin - buffer, ymin - buffer);
        let w = xmax - xmin + 2.0 * buffer;
        let hgt = ymax - ymin + 2.0 * buffer;
        let cells_x = (w / h).ceil().max(1.0) as usize;
        let cells_y = (hgt / h).ceil().max(1.0) as usize;
        // Square cells: use the spacing that covers the wider side exactly.
        let h = (w / cells_x as f64).max(hgt / cells_y as f64);
        let (nx, ny) = (cells_x + 1, cells_y + 1);
        let mut nodes = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                nodes.push((x0 + h * i as f64, y0 + h * j as f64));
            }
        }
        let mut triangles = Vec::with_capacity(2 * cells_x * cells_y);
        for j in 0..cells_y {
            for i in 0..cells_x {
                let n00 = j * nx + i;
                let n10 = n00 + 1;
                let n01 = n00 + nx;
                let n11 = n01 + 1;
                triangles.push([n00, n10, n11]);
                triangles.push([n00, n11, n01]);
            }
        }
        Ok(Self { nodes, triangles, regular: Some(RegularLayout { x0, y0, h, nx, ny }) })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Barycentric weights of a point: up to three `(node, weight)` pairs.
    pub fn locate(&self, x: f64, y: f64) -> Result<Vec<(usize, f64)>> {
        if let Some(l) = self.regular {
            let eps = 1e-9;
            // Snap to grid lines so points at nodes get exact unit weights.
            let snap = |v: f64| if (v - v.round()).abs() < eps { v.round() } else { v };
            let s_all = snap((x - l.x0) / l.h);
            let t_all = snap((y - l.y0) / l.h);
            if s_all < -eps || t_all < -eps || s_all > (l.nx - 1) as f64 + eps || t_all > (l.ny - 1) as f64 + eps {
                bail!(Domain, "point ({x}, {y}) lies outside the mesh");
            }
            let i = (s_all.floor().max(0.0) as usize).min(l.nx - 2);
            let j = (t_all.floor().max(0.0) as usize).min(l.ny - 2);
            let s = (s_all - i as f64).clamp(0.0, 1.0);
            let t = (t_all - j as f64).clamp(0.0, 1.0);
            let n00 = j * l.nx + i;
            let (n10, n01, n11) = (n00 + 1, n00 + l.nx, n00 + l.nx + 1);
            let w = if s >= t {
                [(n00, 1.0 - s), (n10, s - t), (n11, t)]
            } else {
                [(n00, 1.0 - t), (n11, s), (n01, t - s)]
            };
            return Ok(w.into_iter().filter(|&(_, v)| v != 0.0).collect());
        }
        for tri in &self.triangles {
            let [a, b, c] = tri.map(|k| self.nodes[k]);
            let det = (b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1);
            let l1 = ((x - a.0) * (c.1 - a.1) - (c.0 - a.0) * (y - a.1)) / det;
            let l2 = ((b.0 - a.0) * (y - a.1) - (x - a.0) * (b.1 - a.1)) / det;
            let l0 = 1.0 - l1 - l2;
            if l0 >= -1e-12 && l1 >= -1e-12 && l2 >= -1e-12 {
                return Ok([(tri[0], l0), (tri[1], l1), (tri[2], l2)]
                    .into_iter()
                    .filter(|&(_, v)| v != 0.0)
                    .collect());
            }
        }
        bail!(Domain, "point ({x}, {y}) lies outside the mesh")
    }

    /// Sparse projector with one row per point.
    pub fn projector(&self, points: &[(f64, f64)]) -> Result<CscMatrix> {
        let mut t = Vec::with_capacity(3 * points.len());
        for (r, &(x, y)) in points.iter().enumerate() {
            for (node, w) in self.locate(x, y)? {
                t.push((r, node, w));
            }
        }
        Ok(CscMatrix::from_triplets(points.len(), self.n_nodes(), &t))
    }
}

/// Finite-element matrices of the SPDE on a mesh.
#[derive(Debug, Clone)]
pub struct SpdeOperator {
    pub mesh: Mesh,
    /// Lumped mass matrix diagonal.
    pub c: Vec<f64>,
    /// Stiffness matrix.
    pub g: CscMatrix,
}

impl SpdeOperator {
    pub fn new(mesh: Mesh) -> Result<Self> {
        let n = mesh.n_nodes();
        let mut c = vec![0.0; n];
        let mut t = Vec::with_capacity(9 * mesh.triangles.len());
        for tri in &mesh.triangles {
            let p = tri.map(|k| mesh.nodes[k]);
            let area = 0.5 * ((p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1)).abs();
            if !(area > 0.0) {
                bail!(Domain, "degenerate triangle {:?}", tri);
            }
            let edge = |k: usize| {
                let (a, b) = (p[(k + 1) % 3], p[(k + 2) % 3]);
                (b.0 - a.0, b.1 - a.1)
            };
            let e = [edge(0), edge(1), edge(2)];
            for a in 0..3 {
                c[tri[a]] += area / 3.0;
                for b in 0..3 {
                    t.push((tri[a], tri[b], (e[a].0 * e[b].0 + e[a].1 * e[b].1) / (4.0 * area)));
                }
            }
        }
        let g = symmetrize_upper(&CscMatrix::from_triplets(n, n, &t));
        Ok(Self { mesh, c, g })
    }

    /// Operator from explicit matrices (for custom meshes and tests).
    pub fn from_matrices(mesh: Mesh, c: Vec<f64>, g: CscMatrix) -> Result<Self> {
        let n = mesh.n_nodes();
        if c.len() != n || g.nrows() != n || g.ncols() != n {
            bail!(Dimension, "mass and stiffness matrices do not match {n} mesh nodes");
        }
        Ok(Self { mesh, c, g })
    }

    pub fn n_nodes(&self) -> usize {
        self.c.len()
    }

    /// The three precision components on a shared pattern, ready for fast
    /// repeated assembly.
    pub fn precision_parts(&self) -> Result<SpdeParts> {
        if let Some(k) = self.c.iter().position(|v| !(*v > 0.0)) {
            bail!(Domain, "mass matrix is singular at node {k}");
        }
        let n = self.n_nodes();
        let cinv = CscMatrix::diagonal(&self.c.iter().map(|v| 1.0 / v).collect::<Vec<_>>());
        let k = symmetrize_upper(&self.g.matmul(&cinv).matmul(&self.g));
        let cm = CscMatrix::diagonal(&self.c);
        let pattern = cm.add(&self.g, 1.0, 1.0).add(&k, 1.0, 1.0);
        let mut c_vals = vec![0.0; pattern.nnz()];
        let mut g_vals = vec![0.0; pattern.nnz()];
        let mut k_vals = vec![0.0; pattern.nnz()];
        for i in 0..n {
            c_vals[pattern.position(i, i).unwrap()] = self.c[i];
        }
        for (r, col, v) in self.g.triplets() {
            g_vals[pattern.position(r, col).unwrap()] = v;
        }
        for (r, col, v) in k.triplets() {
            k_vals[pattern.position(r, col).unwrap()] = v;
        }
        Ok(SpdeParts { pattern, c_vals, g_vals, k_vals })
    }
}

/// `C`, `G` and `G C^-1 G` aligned on one sparsity pattern.
#[derive(Debug, Clone)]
pub struct SpdeParts {
    pub pattern: CscMatrix,
    pub c_vals: Vec<f64>,
    pub g_vals: Vec<f64>,
    pub k_vals: Vec<f64>,
}

impl SpdeParts {
    /// Stored values of `tau (kappa^4 C + 2 kappa^2 G + G C^-1 G)` on the pattern.
    pub fn values(&self, kappa: f64, tau: f64) -> Vec<f64> {
        let k2 = kappa * kappa;
        let k4 = k2 * k2;
        (0..self.c_vals.len())
            .map(|p| tau * (k4 * self.c_vals[p] + 2.0 * k2 * self.g_vals[p] + self.k_vals[p]))
            .collect()
    }

    pub fn matrix(&self, kappa: f64, tau: f64) -> CscMatrix {
        let mut q = self.pattern.clone();
        q.values_mut().copy_from_slice(&self.values(kappa, tau));
        q
    }
}

/// Mirrors the upper triangle onto the lower so the result is exactly symmetric.
pub fn symmetrize_upper(a: &CscMatrix) -> CscMatrix {
    let mut t = Vec::with_capacity(a.nnz());
    for (r, c, v) in a.triplets() {
        if r <= c {
            t.push((r, c, v));
            if r != c {
                t.push((c, r, v));
            }
        }
    }
    CscMatrix::from_triplets(a.nrows(), a.ncols(), &t)
}

/// SPDE precision `tau (kappa^4 C + 2 kappa^2 G + G C^-1 G)`.
pub fn spde_precision(op: &SpdeOperator, kappa: f64, tau: f64) -> Result<SparsePrecision> {
    if !(kappa > 0.0) || !(tau > 0.0) {
        bail!(InvalidArgument, "kappa and tau must be positive, got {kappa} and {tau}");
    }
    Ok(SparsePrecision { q: op.precision_parts()?.matrix(kappa, tau), constraints: None })
}

/// Shares one symbolic analysis between repeated factorizations of a pattern.
pub fn analyse(pattern: &CscMatrix) -> Result<Arc<SymbolicCholesky>> {
    Ok(Arc::new(SymbolicCholesky::new(pattern)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(m: usize) -> AdjacencyGraph {
        let e: Vec<_> = (0..m - 1).map(|i| (i, i + 1)).collect();
        AdjacencyGraph::from_edges(m, &e).unwrap()
    }

    #[test]
    fn two_node_icar_structure() {
        let icar = icar_scaled(&path(2)).unwrap();
        assert_eq!(icar.structure.to_dense(), DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn icar_scaling_has_unit_geometric_mean() {
        let icar = icar_scaled(&path(7)).unwrap();
        let gm = (icar.marginal_variances.iter().map(|v| v.ln()).sum::<f64>() / 7.0).exp();
        assert!((gm - 1.0).abs() < 1e-10);
        assert_eq!(icar.eigenvalues[0], 0.0);
        assert!(icar.eigenvalues[1..].iter().all(|&g| g > 0.0));
    }

    #[test]
    fn matern_closed_forms() {
        let (k, _) = matern_params(8f64.sqrt(), 1.0).unwrap();
        assert!((k - 1.0).abs() < 1e-15);
        let (k, t) = matern_params(150.0, 0.15).unwrap();
        assert!((k - 0.018_856_180_831_641_27).abs() < 1e-12);
        assert!((t - 9947.183_943_243_457).abs() < 1e-6);
        assert!(matern_params(0.0, 1.0).is_err());
    }

    #[test]
    fn regular_mesh_projector_rows_sum_to_one() {
        let mesh = Mesh::regular((0.0, 0.0, 1.0, 1.0), 0.2, 0.1).unwrap();
        let pts = [(0.0, 0.0), (0.33, 0.71), (0.999, 0.5), (0.5, 0.123)];
        let a = mesh.projector(&pts).unwrap();
        let row_sums = a.mul_vec(&vec![1.0; mesh.n_nodes()]);
        assert!(row_sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let xs: Vec<f64> = mesh.nodes.iter().map(|p| p.0).collect();
        let proj = a.mul_vec(&xs);
        for (p, q) in pts.iter().zip(&proj) {
            assert!((p.0 - q).abs() < 1e-12, "linear functions are interpolated exactly");
        }
        assert!(mesh.locate(5.0, 0.0).is_err());
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let op = SpdeOperator::new(Mesh::regular((0.0, 0.0, 1.0, 1.0), 0.0, 0.25).unwrap()).unwrap();
        let g1 = op.g.mul_vec(&vec![1.0; op.n_nodes()]);
        assert!(g1.iter().all(|v| v.abs() < 1e-12));
        assert!((op.c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(op.g.max_asymmetry(), 0.0);
    }

    #[test]
    fn kriging_enforces_sum_to_zero() {
        let icar = icar_scaled(&path(6)).unwrap();
        let prec = SparsePrecision {
            q: icar.scaled_structure(),
            constraints: Some(LinearConstraints::sum_to_zero(6, 0..6)),
        };
        for x in sample_gmrf(&prec, 50, 9).unwrap() {
            assert!(x.iter().sum::<f64>().abs() < 1e-10);
        }
    }
}
