//! Bilinear finite elements on an [`ExteriorMesh`]: sparse storage,
//! preconditioned conjugate gradients and deterministic assembly.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{BoundaryTag, ExteriorMesh, QuadPoint, DEFAULT_GAUSS_POINTS};
use crate::quadrature::GaussRule;

pub type ElementMatrix = [[f64; 4]; 4];
pub type ElementVector = [f64; 4];

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        });
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&k| self.col_idx[k] == i)
                    .map_or(0.0, |k| self.values[k])
            })
            .collect()
    }

    fn position(&self, i: usize, j: usize) -> usize {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        self.row_ptr[i] + row.binary_search(&j).expect("entry outside sparsity pattern")
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        row.binary_search(&j)
            .map_or(0.0, |k| self.values[self.row_ptr[i] + k])
    }

    /// Replaces the rows and columns of `fixed` nodes by the identity and
    /// zeroes the matching right-hand side entries (homogeneous constraint).
    pub fn constrain_zero(&mut self, fixed: &[bool], rhs: &mut [f64]) {
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                if fixed[i] || fixed[j] {
                    self.values[k] = if i == j { 1.0 } else { 0.0 };
                }
            }
            if fixed[i] {
                rhs[i] = 0.0;
            }
        }
    }
}

/// Convergence record of a conjugate-gradient solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned conjugate gradients for a symmetric positive
/// definite system. `x` holds the initial guess and receives the solution.
pub fn conjugate_gradient(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgStats> {
    let n = a.n;
    let diag = a.diagonal();
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::solver("matrix has a non-positive diagonal entry", vec![]));
    }
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut ax = vec![0.0; n];
    a.mul_vec(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut history = Vec::new();
    for it in 0..max_iter {
        let rel = norm(&r) / b_norm;
        history.push(rel);
        if rel <= tol {
            return Ok(CgStats {
                iterations: it,
                relative_residual: rel,
            });
        }
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::solver("matrix is not positive definite", history));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rel = norm(&r) / b_norm;
    history.push(rel);
    if rel <= tol {
        return Ok(CgStats {
            iterations: max_iter,
            relative_residual: rel,
        });
    }
    Err(Error::solver(
        format!("conjugate gradients did not reach {tol:e} in {max_iter} iterations"),
        history,
    ))
}

/// Mesh plus precomputed quadrature data and sparsity pattern.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub mesh: ExteriorMesh,
    pub rule: GaussRule,
    pub quad: Vec<Vec<QuadPoint>>,
    pattern: CsrMatrix,
}

impl Discretization {
    pub fn new(mesh: ExteriorMesh) -> Self {
        Self::with_rule(mesh, GaussRule::new(DEFAULT_GAUSS_POINTS))
    }

    pub fn with_rule(mesh: ExteriorMesh, rule: GaussRule) -> Self {
        let quad: Vec<Vec<QuadPoint>> = (0..mesh.cells.len())
            .into_par_iter()
            .map(|c| mesh.cell_quadrature(c, &rule))
            .collect();
        let n = mesh.nodes.len();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for cell in &mesh.cells {
            for &a in cell {
                rows[a].extend_from_slice(cell);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        let values = vec![0.0; col_idx.len()];
        let pattern = CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        };
        Self {
            mesh,
            rule,
            quad,
            pattern,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.mesh.nodes.len()
    }

    /// Assembles a global matrix from element matrices. Element work runs in
    /// parallel; the scatter is serial so results are bit-reproducible.
    pub fn assemble_matrix<F>(&self, element: F) -> CsrMatrix
    where
        F: Fn(usize, &[QuadPoint]) -> ElementMatrix + Sync,
    {
        let locals: Vec<ElementMatrix> = (0..self.mesh.cells.len())
            .into_par_iter()
            .map(|c| element(c, &self.quad[c]))
            .collect();
        let mut m = self.pattern.clone();
        for (c, k) in locals.iter().enumerate() {
            let cell = &self.mesh.cells[c];
            for a in 0..4 {
                for b in 0..4 {
                    let pos = m.position(cell[a], cell[b]);
                    m.values[pos] += k[a][b];
                }
            }
        }
        m
    }

    pub fn assemble_vector<F>(&self, element: F) -> Vec<f64>
    where
        F: Fn(usize, &[QuadPoint]) -> ElementVector + Sync,
    {
        let locals: Vec<ElementVector> = (0..self.mesh.cells.len())
            .into_par_iter()
            .map(|c| element(c, &self.quad[c]))
            .collect();
        let mut v = vec![0.0; self.n_nodes()];
        for (c, f) in locals.iter().enumerate() {
            for (a, &node) in self.mesh.cells[c].iter().enumerate() {
                v[node] += f[a];
            }
        }
        v
    }

    /// Sum of per-cell contributions in cell order.
    pub fn integrate<F>(&self, cell_value: F) -> f64
    where
        F: Fn(usize, &[QuadPoint]) -> f64 + Sync,
    {
        let parts: Vec<f64> = (0..self.mesh.cells.len())
            .into_par_iter()
            .map(|c| cell_value(c, &self.quad[c]))
            .collect();
        parts.iter().sum()
    }

    /// Maximum of per-cell values.
    pub fn max_over_cells<F>(&self, cell_value: F) -> f64
    where
        F: Fn(usize, &[QuadPoint]) -> f64 + Sync,
    {
        (0..self.mesh.cells.len())
            .into_par_iter()
            .map(|c| cell_value(c, &self.quad[c]))
            .reduce(|| f64::NEG_INFINITY, f64::max)
    }

    /// Local nodal values of a global field on cell `c`.
    #[inline]
    pub fn local(&self, c: usize, u: &[f64]) -> [f64; 4] {
        let cell = &self.mesh.cells[c];
        [u[cell[0]], u[cell[1]], u[cell[2]], u[cell[3]]]
    }

    /// Stiffness matrix `∫ ∇η_a · ∇η_b`.
    pub fn stiffness(&self) -> CsrMatrix {
        self.assemble_matrix(|_, qps| {
            let mut k = [[0.0; 4]; 4];
            for q in qps {
                for a in 0..4 {
                    for b in 0..4 {
                        k[a][b] += q.weight
                            * (q.grad[a][0] * q.grad[b][0] + q.grad[a][1] * q.grad[b][1]);
                    }
                }
            }
            k
        })
    }

    /// Consistent mass matrix `∫ η_a η_b`.
    pub fn mass(&self) -> CsrMatrix {
        self.assemble_matrix(|_, qps| {
            let mut k = [[0.0; 4]; 4];
            for q in qps {
                for a in 0..4 {
                    for b in 0..4 {
                        k[a][b] += q.weight * q.shape[a] * q.shape[b];
                    }
                }
            }
            k
        })
    }

    /// Mask of nodes on boundaries with the given tag.
    pub fn boundary_mask(&self, tag: BoundaryTag) -> Vec<bool> {
        let mut mask = vec![false; self.n_nodes()];
        for f in self.mesh.facets.iter().filter(|f| f.tag == tag) {
            for &n in &f.nodes {
                mask[n] = true;
            }
        }
        mask
    }

    /// L² projection of values given at quadrature points onto the nodal
    /// space. `f(c, k)` returns the value at quadrature point `k` of cell `c`.
    pub fn l2_project<F>(&self, f: F) -> Result<Vec<f64>>
    where
        F: Fn(usize, usize) -> f64 + Sync,
    {
        let m = self.mass();
        let rhs = self.assemble_vector(|c, qps| {
            let mut v = [0.0; 4];
            for (k, q) in qps.iter().enumerate() {
                let val = f(c, k);
                for a in 0..4 {
                    v[a] += q.weight * val * q.shape[a];
                }
            }
            v
        });
        let mut x = vec![0.0; self.n_nodes()];
        conjugate_gradient(&m, &rhs, &mut x, 1e-12, 20 * self.n_nodes())?;
        Ok(x)
    }
}

/// Values attached to every quadrature point, stored cell by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadField<T> {
    pub points_per_cell: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Send + Sync> QuadField<T> {
    /// Evaluates `f(c, k, q)` at every quadrature point.
    pub fn from_fn<F>(disc: &Discretization, f: F) -> Self
    where
        F: Fn(usize, usize, &QuadPoint) -> T + Sync,
    {
        let per_cell: Vec<Vec<T>> = (0..disc.mesh.cells.len())
            .into_par_iter()
            .map(|c| {
                disc.quad[c]
                    .iter()
                    .enumerate()
                    .map(|(k, q)| f(c, k, q))
                    .collect()
            })
            .collect();
        Self {
            points_per_cell: disc.rule.nodes.len().pow(2),
            data: per_cell.into_iter().flatten().collect(),
        }
    }

    pub fn filled(disc: &Discretization, value: T) -> Self {
        let n = disc.rule.nodes.len().pow(2);
        Self {
            points_per_cell: n,
            data: vec![value; n * disc.mesh.cells.len()],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, k: usize) -> T {
        self.data[c * self.points_per_cell + k]
    }
}

/// Value of a nodal field at a quadrature point.
#[inline]
pub fn value_at(local: &[f64; 4], q: &QuadPoint) -> f64 {
    (0..4).map(|a| local[a] * q.shape[a]).sum()
}

/// Gradient of a nodal field at a quadrature point.
#[inline]
pub fn gradient_at(local: &[f64; 4], q: &QuadPoint) -> [f64; 2] {
    let mut g = [0.0; 2];
    for a in 0..4 {
        g[0] += local[a] * q.grad[a][0];
        g[1] += local[a] * q.grad[a][1];
    }
    g
}

/// Value and gradient of a nodal field at an arbitrary physical point.
pub fn evaluate(mesh: &ExteriorMesh, u: &[f64], p: [f64; 2]) -> Result<(f64, [f64; 2])> {
    let (c, xi, eta) = mesh.locate(p)?;
    let (q, _) = mesh.reference_point(c, xi, eta);
    let cell = &mesh.cells[c];
    let local = [u[cell[0]], u[cell[1]], u[cell[2]], u[cell[3]]];
    Ok((value_at(&local, &q), gradient_at(&local, &q)))
}
