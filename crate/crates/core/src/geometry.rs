//! Structured shell meshes of a truncated exterior domain.
//!
//! The fluid region between the obstacle boundary Γ and the far-field circle
//! Σ_R is parametrised by `(t, θ)` with
//! `x(t, θ) = ((1−t)A + tR) cos θ, ((1−t)B + tR) sin θ)`,
//! where `A, B` are the obstacle semi-axes. Cells are rectangles in `(t, θ)`,
//! so the geometry is represented exactly and cell Jacobians are smooth.
//!
//! In axisymmetric mode the second coordinate is the distance to the x₁ axis,
//! `θ ∈ [0, π]`, and every volume or surface integral carries the factor
//! `2π x₂`. In planar mode `θ ∈ [0, 2π)` is periodic.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussRule;

/// Default number of Gauss points per direction in each cell.
pub const DEFAULT_GAUSS_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObstacleShape {
    Sphere { radius: f64 },
    Disk { radius: f64 },
    /// `semi_x` along the flow direction x₁, `semi_y` across it.
    Ellipse { semi_x: f64, semi_y: f64 },
}

impl ObstacleShape {
    pub fn semi_axes(&self) -> (f64, f64) {
        match *self {
            ObstacleShape::Sphere { radius } | ObstacleShape::Disk { radius } => (radius, radius),
            ObstacleShape::Ellipse { semi_x, semi_y } => (semi_x, semi_y),
        }
    }

    pub fn max_radius(&self) -> f64 {
        let (a, b) = self.semi_axes();
        a.max(b)
    }

    /// Symmetric under `x₁ → −x₁`; true for every supported shape.
    pub fn is_reflection_symmetric(&self) -> bool {
        true
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ObstacleShape::Sphere { .. } => "sphere",
            ObstacleShape::Disk { .. } => "disk",
            ObstacleShape::Ellipse { .. } => "ellipse",
        }
    }

    fn validate(&self) -> Result<()> {
        let (a, b) = self.semi_axes();
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::Construction(format!(
                "obstacle radii must be positive, got ({a}, {b})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeshMode {
    /// Two-dimensional flow; outside the n ≥ 3 theory.
    #[serde(rename = "planar-2d")]
    Planar2d,
    /// Three-dimensional flow symmetric about the x₁ axis.
    #[serde(rename = "axisymmetric-3d")]
    Axisymmetric3d,
}

impl MeshMode {
    /// Physical space dimension n.
    pub fn dimension(&self) -> usize {
        match self {
            MeshMode::Planar2d => 2,
            MeshMode::Axisymmetric3d => 3,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            MeshMode::Planar2d => "planar-2d-outside-theory",
            MeshMode::Axisymmetric3d => "axisymmetric-3d",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MeshMode::Planar2d => "planar-2d",
            MeshMode::Axisymmetric3d => "axisymmetric-3d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "planar-2d" => Some(MeshMode::Planar2d),
            "axisymmetric-3d" => Some(MeshMode::Axisymmetric3d),
            _ => None,
        }
    }

    /// Measure factor at a point of the computational plane.
    #[inline]
    pub fn measure_factor(&self, x: [f64; 2]) -> f64 {
        match self {
            MeshMode::Planar2d => 1.0,
            MeshMode::Axisymmetric3d => 2.0 * PI * x[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryTag {
    /// The obstacle surface Γ.
    Obstacle,
    /// The truncation surface Σ_R.
    FarField,
    /// The symmetry axis in axisymmetric mode; not a physical boundary.
    Axis,
}

impl BoundaryTag {
    pub fn name(&self) -> &'static str {
        match self {
            BoundaryTag::Obstacle => "obstacle",
            BoundaryTag::FarField => "far_field",
            BoundaryTag::Axis => "axis",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "obstacle" => Some(BoundaryTag::Obstacle),
            "far_field" => Some(BoundaryTag::FarField),
            "axis" => Some(BoundaryTag::Axis),
            _ => None,
        }
    }
}

/// Which side of its cell a boundary facet lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellSide {
    /// ξ = −1 (t = t_i).
    Inner,
    /// ξ = +1 (t = t_{i+1}).
    Outer,
    /// η = −1.
    Low,
    /// η = +1.
    High,
}

impl CellSide {
    pub fn name(&self) -> &'static str {
        match self {
            CellSide::Inner => "inner",
            CellSide::Outer => "outer",
            CellSide::Low => "low",
            CellSide::High => "high",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inner" => Some(CellSide::Inner),
            "outer" => Some(CellSide::Outer),
            "low" => Some(CellSide::Low),
            "high" => Some(CellSide::High),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Facet {
    pub cell: usize,
    pub side: CellSide,
    pub nodes: [usize; 2],
    pub tag: BoundaryTag,
}

/// Orientation convention of stored normals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalOrientation {
    /// Pointing out of the fluid. On Γ this is the unit normal pointing into
    /// the obstacle, i.e. the obstacle's inward normal.
    OutOfFluid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryNormal {
    pub node: usize,
    pub tag: BoundaryTag,
    pub point: [f64; 2],
    pub normal: [f64; 2],
    pub orientation: NormalOrientation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshParams {
    pub shape: ObstacleShape,
    pub r_far: f64,
    pub n_r: usize,
    pub n_t: usize,
    pub grading: f64,
    pub mode: MeshMode,
}

/// Quadrature point of a cell with precomputed shape data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadPoint {
    pub x: [f64; 2],
    /// Gauss weight × Jacobian × measure factor.
    pub weight: f64,
    pub shape: [f64; 4],
    pub grad: [[f64; 2]; 4],
}

/// Quadrature point on a boundary facet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FacetPoint {
    pub x: [f64; 2],
    /// Gauss weight × arc length × measure factor.
    pub weight: f64,
    pub normal: [f64; 2],
    /// Reference coordinates inside the owning cell.
    pub xi: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExteriorMesh {
    pub params: MeshParams,
    pub t_levels: Vec<f64>,
    pub theta_levels: Vec<f64>,
    pub nodes: Vec<[f64; 2]>,
    pub cells: Vec<[usize; 4]>,
    pub facets: Vec<Facet>,
}

/// Builds the structured shell mesh between the obstacle and radius `r_far`.
pub fn build_mesh(
    shape: ObstacleShape,
    r_far: f64,
    n_r: usize,
    n_t: usize,
    grading: f64,
    mode: MeshMode,
) -> Result<ExteriorMesh> {
    shape.validate()?;
    let a = shape.max_radius();
    if !(r_far >= 5.0 * a) || !r_far.is_finite() {
        return Err(Error::Construction(format!(
            "far-field radius {r_far} must be at least 5 obstacle radii ({})",
            5.0 * a
        )));
    }
    if n_r < 4 || n_t < 4 {
        return Err(Error::Construction(format!(
            "need at least 4 radial and 4 angular divisions, got {n_r} x {n_t}"
        )));
    }
    if !(grading >= 1.0) || !grading.is_finite() {
        return Err(Error::Construction(format!("grading must be >= 1, got {grading}")));
    }
    let params = MeshParams {
        shape,
        r_far,
        n_r,
        n_t,
        grading,
        mode,
    };
    let t_levels: Vec<f64> = (0..=n_r)
        .map(|i| {
            if grading == 1.0 {
                i as f64 / n_r as f64
            } else {
                (grading.powi(i as i32) - 1.0) / (grading.powi(n_r as i32) - 1.0)
            }
        })
        .collect();
    if t_levels.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Construction("radial grading produced degenerate layers".into()));
    }
    let span = match mode {
        MeshMode::Axisymmetric3d => PI,
        MeshMode::Planar2d => 2.0 * PI,
    };
    let theta_levels: Vec<f64> = (0..=n_t).map(|j| span * j as f64 / n_t as f64).collect();

    let mut mesh = ExteriorMesh {
        params,
        t_levels,
        theta_levels,
        nodes: Vec::new(),
        cells: Vec::new(),
        facets: Vec::new(),
    };
    let n_ang = mesh.angular_nodes();
    for i in 0..=n_r {
        for j in 0..n_ang {
            let mut x = mesh.map(mesh.t_levels[i], mesh.theta_levels[j]);
            if mode == MeshMode::Axisymmetric3d && (j == 0 || j == n_t) {
                x[1] = 0.0;
            }
            mesh.nodes.push(x);
        }
    }
    for i in 0..n_r {
        for j in 0..n_t {
            let jn = (j + 1) % n_ang;
            mesh.cells.push([
                i * n_ang + j,
                (i + 1) * n_ang + j,
                (i + 1) * n_ang + jn,
                i * n_ang + jn,
            ]);
        }
    }
    for j in 0..n_t {
        let c = mesh.cell_index(0, j);
        let [n0, _, _, n3] = mesh.cells[c];
        mesh.facets.push(Facet {
            cell: c,
            side: CellSide::Inner,
            nodes: [n0, n3],
            tag: BoundaryTag::Obstacle,
        });
    }
    for j in 0..n_t {
        let c = mesh.cell_index(n_r - 1, j);
        let [_, n1, n2, _] = mesh.cells[c];
        mesh.facets.push(Facet {
            cell: c,
            side: CellSide::Outer,
            nodes: [n1, n2],
            tag: BoundaryTag::FarField,
        });
    }
    if mode == MeshMode::Axisymmetric3d {
        for i in 0..n_r {
            let c = mesh.cell_index(i, 0);
            let [n0, n1, _, _] = mesh.cells[c];
            mesh.facets.push(Facet {
                cell: c,
                side: CellSide::Low,
                nodes: [n0, n1],
                tag: BoundaryTag::Axis,
            });
            let c = mesh.cell_index(i, n_t - 1);
            let [_, _, n2, n3] = mesh.cells[c];
            mesh.facets.push(Facet {
                cell: c,
                side: CellSide::High,
                nodes: [n3, n2],
                tag: BoundaryTag::Axis,
            });
        }
    }
    mesh.check_jacobians()?;
    Ok(mesh)
}

impl ExteriorMesh {
    pub fn mode(&self) -> MeshMode {
        self.params.mode
    }

    pub fn n_r(&self) -> usize {
        self.params.n_r
    }

    pub fn n_t(&self) -> usize {
        self.params.n_t
    }

    /// Number of distinct node columns in θ.
    pub fn angular_nodes(&self) -> usize {
        match self.params.mode {
            MeshMode::Axisymmetric3d => self.params.n_t + 1,
            MeshMode::Planar2d => self.params.n_t,
        }
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        i * self.angular_nodes() + j
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i * self.params.n_t + j
    }

    /// `(i, j)` of a cell.
    pub fn cell_ij(&self, c: usize) -> (usize, usize) {
        (c / self.params.n_t, c % self.params.n_t)
    }

    pub fn obstacle_radius(&self) -> f64 {
        self.params.shape.max_radius()
    }

    /// `x(t, θ)`.
    pub fn map(&self, t: f64, theta: f64) -> [f64; 2] {
        let (a, b) = self.params.shape.semi_axes();
        let r = self.params.r_far;
        [
            ((1.0 - t) * a + t * r) * theta.cos(),
            ((1.0 - t) * b + t * r) * theta.sin(),
        ]
    }

    /// Partial derivatives `(∂x/∂t, ∂x/∂θ)`.
    fn map_derivatives(&self, t: f64, theta: f64) -> ([f64; 2], [f64; 2]) {
        let (a, b) = self.params.shape.semi_axes();
        let r = self.params.r_far;
        let (s, c) = theta.sin_cos();
        let dt = [(r - a) * c, (r - b) * s];
        let dth = [-((1.0 - t) * a + t * r) * s, ((1.0 - t) * b + t * r) * c];
        (dt, dth)
    }

    /// Parameter values `(t, θ)` and their half-widths for cell `c` at
    /// reference point `(ξ, η)`.
    fn cell_param(&self, c: usize, xi: f64, eta: f64) -> (f64, f64, f64, f64) {
        let (i, j) = self.cell_ij(c);
        let (t0, t1) = (self.t_levels[i], self.t_levels[i + 1]);
        let (h0, h1) = (self.theta_levels[j], self.theta_levels[j + 1]);
        let t = t0 + 0.5 * (xi + 1.0) * (t1 - t0);
        let th = h0 + 0.5 * (eta + 1.0) * (h1 - h0);
        (t, th, 0.5 * (t1 - t0), 0.5 * (h1 - h0))
    }

    /// Physical point, Jacobian determinant and shape-function data at
    /// reference point `(ξ, η)` of cell `c`.
    pub fn reference_point(&self, c: usize, xi: f64, eta: f64) -> (QuadPoint, f64) {
        let (t, th, dt_dxi, dth_deta) = self.cell_param(c, xi, eta);
        let x = self.map(t, th);
        let (xt, xth) = self.map_derivatives(t, th);
        let j = [
            [xt[0] * dt_dxi, xth[0] * dth_deta],
            [xt[1] * dt_dxi, xth[1] * dth_deta],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let shape = [
            0.25 * (1.0 - xi) * (1.0 - eta),
            0.25 * (1.0 + xi) * (1.0 - eta),
            0.25 * (1.0 + xi) * (1.0 + eta),
            0.25 * (1.0 - xi) * (1.0 + eta),
        ];
        let dref = [
            [-0.25 * (1.0 - eta), -0.25 * (1.0 - xi)],
            [0.25 * (1.0 - eta), -0.25 * (1.0 + xi)],
            [0.25 * (1.0 + eta), 0.25 * (1.0 + xi)],
            [-0.25 * (1.0 + eta), 0.25 * (1.0 - xi)],
        ];
        let mut grad = [[0.0; 2]; 4];
        for a in 0..4 {
            let (dxi, deta) = (dref[a][0], dref[a][1]);
            grad[a][0] = (j[1][1] * dxi - j[1][0] * deta) / det;
            grad[a][1] = (-j[0][1] * dxi + j[0][0] * deta) / det;
        }
        (
            QuadPoint {
                x,
                weight: det,
                shape,
                grad,
            },
            det,
        )
    }

    /// Tensor Gauss quadrature of cell `c`.
    pub fn cell_quadrature(&self, c: usize, rule: &GaussRule) -> Vec<QuadPoint> {
        let mut out = Vec::with_capacity(rule.nodes.len() * rule.nodes.len());
        for (xi, wx) in rule.nodes.iter().zip(&rule.weights) {
            for (eta, we) in rule.nodes.iter().zip(&rule.weights) {
                let (mut qp, det) = self.reference_point(c, *xi, *eta);
                qp.weight = wx * we * det * self.params.mode.measure_factor(qp.x);
                out.push(qp);
            }
        }
        out
    }

    fn check_jacobians(&self) -> Result<()> {
        let probes = [-1.0, 0.0, 1.0];
        for c in 0..self.cells.len() {
            for &xi in &probes {
                for &eta in &probes {
                    let (_, det) = self.reference_point(c, xi, eta);
                    if !(det > 0.0) {
                        return Err(Error::Construction(format!(
                            "non-positive Jacobian {det} in cell {c}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Total (weighted) volume of the shell.
    pub fn volume(&self, rule: &GaussRule) -> f64 {
        (0..self.cells.len())
            .flat_map(|c| self.cell_quadrature(c, rule))
            .map(|q| q.weight)
            .sum()
    }

    /// Gauss points on a boundary facet with outward-from-fluid normals.
    pub fn facet_quadrature(&self, facet: &Facet, rule: &GaussRule) -> Vec<FacetPoint> {
        let mut out = Vec::with_capacity(rule.nodes.len());
        for (s, w) in rule.nodes.iter().zip(&rule.weights) {
            let xi = match facet.side {
                CellSide::Inner => [-1.0, *s],
                CellSide::Outer => [1.0, *s],
                CellSide::Low => [*s, -1.0],
                CellSide::High => [*s, 1.0],
            };
            let (t, th, dt_dxi, dth_deta) = self.cell_param(facet.cell, xi[0], xi[1]);
            let x = self.map(t, th);
            let (xt, xth) = self.map_derivatives(t, th);
            let (tangent, scale) = match facet.side {
                CellSide::Inner | CellSide::Outer => (xth, dth_deta),
                CellSide::Low | CellSide::High => (xt, dt_dxi),
            };
            let len = (tangent[0] * tangent[0] + tangent[1] * tangent[1]).sqrt();
            // Rotating the counter-clockwise tangent clockwise points away
            // from the origin side of the curve.
            let away = [tangent[1] / len, -tangent[0] / len];
            let normal = match facet.side {
                CellSide::Inner => [-away[0], -away[1]],
                CellSide::Outer => away,
                // Lines of constant θ: out of the cell is −∂x/∂θ on the low
                // side and +∂x/∂θ on the high side, orthogonalised.
                CellSide::Low => outward_from_tangent(xt, xth, -1.0),
                CellSide::High => outward_from_tangent(xt, xth, 1.0),
            };
            let mut pos = x;
            if facet.tag == BoundaryTag::Axis {
                pos[1] = 0.0;
            }
            out.push(FacetPoint {
                x: pos,
                weight: w * len * scale * self.params.mode.measure_factor(pos),
                normal,
                xi,
            });
        }
        out
    }

    /// Unit normals at every node of Γ and Σ_R, from the gradient of the
    /// implicit description of each curve.
    pub fn boundary_normals(&self) -> Vec<BoundaryNormal> {
        let (a, b) = self.params.shape.semi_axes();
        let r = self.params.r_far;
        let n_ang = self.angular_nodes();
        let mut out = Vec::with_capacity(2 * n_ang);
        for (i, tag, sign, (ax, bx)) in [
            (0, BoundaryTag::Obstacle, -1.0, (a, b)),
            (self.params.n_r, BoundaryTag::FarField, 1.0, (r, r)),
        ] {
            for j in 0..n_ang {
                let node = self.node_index(i, j);
                let th = self.theta_levels[j];
                // ∇(x²/A² + y²/B²) at (A cos θ, B sin θ) ∝ (cos θ / A, sin θ / B).
                let g = [th.cos() / ax, th.sin() / bx];
                let len = (g[0] * g[0] + g[1] * g[1]).sqrt();
                out.push(BoundaryNormal {
                    node,
                    tag,
                    point: self.nodes[node],
                    normal: [sign * g[0] / len, sign * g[1] / len],
                    orientation: NormalOrientation::OutOfFluid,
                });
            }
        }
        out
    }

    /// Locates a physical point: returns `(cell, ξ, η)`.
    pub fn locate(&self, p: [f64; 2]) -> Result<(usize, f64, f64)> {
        let (a, b) = self.params.shape.semi_axes();
        let r_far = self.params.r_far;
        let mode = self.params.mode;
        let mut th = p[1].atan2(p[0]);
        if mode == MeshMode::Planar2d && th < 0.0 {
            th += 2.0 * PI;
        }
        if mode == MeshMode::Axisymmetric3d && p[1] < 0.0 {
            return Err(Error::Domain(format!("point {p:?} below the symmetry axis")));
        }
        let rad = (p[0] * p[0] + p[1] * p[1]).sqrt();
        let mut t = (rad - a.min(b)) / (r_far - a.min(b));
        // Newton on x(t, θ) = p.
        for _ in 0..50 {
            let x = self.map(t, th);
            let (xt, xth) = self.map_derivatives(t, th);
            let det = xt[0] * xth[1] - xth[0] * xt[1];
            let r0 = p[0] - x[0];
            let r1 = p[1] - x[1];
            let dt = (xth[1] * r0 - xth[0] * r1) / det;
            let dth = (-xt[1] * r0 + xt[0] * r1) / det;
            t += dt;
            th += dth;
            if dt.abs() < 1e-15 && dth.abs() < 1e-15 {
                break;
            }
        }
        let span = *self.theta_levels.last().unwrap();
        if mode == MeshMode::Planar2d {
            th = th.rem_euclid(2.0 * PI);
        } else {
            th = th.clamp(0.0, span);
        }
        let tol = 1e-12;
        if t < -tol || t > 1.0 + tol {
            return Err(Error::Domain(format!("point {p:?} lies outside the mesh")));
        }
        let t = t.clamp(0.0, 1.0);
        let i = find_interval(&self.t_levels, t);
        let j = find_interval(&self.theta_levels, th);
        let c = self.cell_index(i, j);
        let xi = 2.0 * (t - self.t_levels[i]) / (self.t_levels[i + 1] - self.t_levels[i]) - 1.0;
        let eta = 2.0 * (th - self.theta_levels[j]) / (self.theta_levels[j + 1] - self.theta_levels[j]) - 1.0;
        Ok((c, xi, eta))
    }

    /// Nodes on the far-field boundary Σ_R.
    pub fn far_field_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        let i = self.params.n_r;
        (0..self.angular_nodes()).map(move |j| self.node_index(i, j))
    }

    pub fn is_far_field_node(&self, node: usize) -> bool {
        node / self.angular_nodes() == self.params.n_r
    }

    /// Node index of the mirror image under `x₁ → −x₁`.
    pub fn mirror_node(&self, node: usize) -> usize {
        let n_ang = self.angular_nodes();
        let (i, j) = (node / n_ang, node % n_ang);
        let nt = self.params.n_t;
        let jm = match self.params.mode {
            MeshMode::Axisymmetric3d => nt - j,
            MeshMode::Planar2d => (nt / 2 + nt - j) % nt,
        };
        self.node_index(i, jm)
    }
}

fn outward_from_tangent(xt: [f64; 2], xth: [f64; 2], sign: f64) -> [f64; 2] {
    // Component of sign·∂x/∂θ orthogonal to the facet direction ∂x/∂t.
    let tt = xt[0] * xt[0] + xt[1] * xt[1];
    let proj = (xth[0] * xt[0] + xth[1] * xt[1]) / tt;
    let v = [sign * (xth[0] - proj * xt[0]), sign * (xth[1] - proj * xt[1])];
    let len = (v[0] * v[0] + v[1] * v[1]).sqrt();
    [v[0] / len, v[1] / len]
}

fn find_interval(levels: &[f64], v: f64) -> usize {
    let n = levels.len() - 1;
    match levels.binary_search_by(|x| x.total_cmp(&v)) {
        Ok(k) => k.min(n - 1),
        Err(k) => k.saturating_sub(1).min(n - 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sphere(n_r: usize, n_t: usize) -> ExteriorMesh {
        build_mesh(
            ObstacleShape::Sphere { radius: 1.0 },
            10.0,
            n_r,
            n_t,
            1.15,
            MeshMode::Axisymmetric3d,
        )
        .unwrap()
    }

    #[test]
    fn axisymmetric_volume_matches_shell() {
        let rule = GaussRule::new(DEFAULT_GAUSS_POINTS);
        let mesh = sphere(8, 8);
        let exact = 4.0 * PI / 3.0 * (1000.0 - 1.0);
        assert_relative_eq!(mesh.volume(&rule), exact, max_relative = 1e-8);
        let fine = sphere(16, 16);
        let rel = (fine.volume(&rule) - mesh.volume(&rule)).abs() / exact;
        assert!(rel < 1e-10, "refinement changed the volume by {rel}");
        assert_eq!(mesh.nodes.len(), 9 * 9);
    }

    #[test]
    fn planar_area_matches_annulus() {
        let rule = GaussRule::new(DEFAULT_GAUSS_POINTS);
        let mesh = build_mesh(
            ObstacleShape::Disk { radius: 1.0 },
            10.0,
            8,
            8,
            1.0,
            MeshMode::Planar2d,
        )
        .unwrap();
        assert_relative_eq!(mesh.volume(&rule), PI * 99.0, max_relative = 1e-8);
        assert_eq!(mesh.nodes.len(), 9 * 8);
    }

    #[test]
    fn rejects_degenerate_input() {
        let s = ObstacleShape::Sphere { radius: 1.0 };
        assert!(build_mesh(s, 4.0, 8, 8, 1.1, MeshMode::Axisymmetric3d).is_err());
        assert!(build_mesh(s, 10.0, 3, 8, 1.1, MeshMode::Axisymmetric3d).is_err());
        assert!(build_mesh(s, 10.0, 8, 8, 0.9, MeshMode::Axisymmetric3d).is_err());
        let bad = ObstacleShape::Sphere { radius: -1.0 };
        assert!(build_mesh(bad, 10.0, 8, 8, 1.1, MeshMode::Axisymmetric3d).is_err());
    }

    #[test]
    fn boundary_normals_examples() {
        let mesh = sphere(8, 8);
        let normals = mesh.boundary_normals();
        for n in &normals {
            let len = (n.normal[0].powi(2) + n.normal[1].powi(2)).sqrt();
            assert!((len - 1.0).abs() < 1e-12);
        }
        let at = |tag, node| normals.iter().find(|n| n.tag == tag && n.node == node).unwrap();
        let g = at(BoundaryTag::Obstacle, mesh.node_index(0, 0));
        assert_eq!(g.point, [1.0, 0.0]);
        assert_relative_eq!(g.normal[0], -1.0, epsilon = 1e-15);
        let f = at(BoundaryTag::FarField, mesh.node_index(8, 0));
        assert_relative_eq!(f.normal[0], 1.0, epsilon = 1e-15);

        let ell = build_mesh(
            ObstacleShape::Ellipse { semi_x: 2.0, semi_y: 1.0 },
            10.0,
            6,
            8,
            1.1,
            MeshMode::Planar2d,
        )
        .unwrap();
        let normals = ell.boundary_normals();
        let n = normals.iter().find(|n| n.node == 0).unwrap();
        assert_eq!(n.point, [2.0, 0.0]);
        assert_relative_eq!(n.normal[0].abs(), 1.0, epsilon = 1e-15);
        // Analytic ellipse normal at parameter θ vs facet normals.
        let rule = GaussRule::new(3);
        for facet in ell.facets.iter().filter(|f| f.tag == BoundaryTag::Obstacle) {
            for p in ell.facet_quadrature(facet, &rule) {
                let th = (p.x[1] / 1.0).atan2(p.x[0] / 2.0);
                let g = [th.cos() / 2.0, th.sin() / 1.0];
                let len = (g[0] * g[0] + g[1] * g[1]).sqrt();
                assert_relative_eq!(p.normal[0], -g[0] / len, epsilon = 1e-12);
                assert_relative_eq!(p.normal[1], -g[1] / len, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn divergence_theorem_at_quadrature_level() {
        let rule = GaussRule::new(DEFAULT_GAUSS_POINTS);
        for mesh in [
            sphere(8, 12),
            build_mesh(
                ObstacleShape::Ellipse { semi_x: 1.5, semi_y: 1.0 },
                10.0,
                8,
                16,
                1.1,
                MeshMode::Planar2d,
            )
            .unwrap(),
        ] {
            let flux: f64 = mesh
                .facets
                .iter()
                .flat_map(|f| mesh.facet_quadrature(f, &rule))
                .map(|p| p.weight * (p.x[0] * p.normal[0] + p.x[1] * p.normal[1]))
                .sum();
            let dim = mesh.mode().dimension() as f64;
            assert_relative_eq!(flux, dim * mesh.volume(&rule), max_relative = 1e-6);
        }
    }

    #[test]
    fn every_facet_has_one_tag_and_jacobians_positive() {
        let mesh = sphere(6, 6);
        let mut seen = std::collections::HashSet::new();
        for f in &mesh.facets {
            assert!(seen.insert((f.cell, f.side)), "duplicate facet");
        }
        assert_eq!(mesh.facets.len(), 6 + 6 + 2 * 6);
        let rule = GaussRule::new(2);
        for c in 0..mesh.cells.len() {
            assert!(mesh.cell_quadrature(c, &rule).iter().all(|q| q.weight >= 0.0));
        }
    }

    #[test]
    fn mesh_is_reflection_symmetric() {
        for mesh in [
            sphere(5, 8),
            build_mesh(ObstacleShape::Disk { radius: 1.0 }, 6.0, 5, 12, 1.1, MeshMode::Planar2d).unwrap(),
        ] {
            for (k, x) in mesh.nodes.iter().enumerate() {
                let m = mesh.nodes[mesh.mirror_node(k)];
                assert!((m[0] + x[0]).abs() < 1e-12 && (m[1] - x[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn locate_inverts_the_map() {
        let mesh = build_mesh(
            ObstacleShape::Ellipse { semi_x: 1.5, semi_y: 1.0 },
            10.0,
            8,
            12,
            1.2,
            MeshMode::Axisymmetric3d,
        )
        .unwrap();
        for c in [0, 17, 50, 95] {
            let (qp, _) = mesh.reference_point(c, 0.3, -0.6);
            let (c2, xi, eta) = mesh.locate(qp.x).unwrap();
            assert_eq!(c2, c);
            assert_relative_eq!(xi, 0.3, epsilon = 1e-10);
            assert_relative_eq!(eta, -0.6, epsilon = 1e-10);
        }
        assert!(mesh.locate([0.5, 0.1]).is_err());
        assert!(mesh.locate([20.0, 0.0]).is_err());
    }
}
