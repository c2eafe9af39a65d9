//! Incompressible reference flow: the exterior Neumann problem for the
//! perturbation potential ψ̄ with φ̄ = ψ̄ + q∞x₁.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{conjugate_gradient, gradient_at, value_at, Discretization, QuadField};
use crate::gas::ForceValue;
use crate::geometry::BoundaryTag;

/// Relative residual used for every linear solve of the reference problem.
pub const LINEAR_TOL: f64 = 1e-10;

pub type VelocityField = QuadField<[f64; 2]>;
pub type ForceField = QuadField<ForceValue>;

/// Closure of the truncated domain at the far-field boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FarFieldCondition {
    /// The perturbation potential vanishes on Σ_R.
    #[default]
    Dirichlet,
    /// Zero normal derivative of the perturbation on Σ_R; one node pinned.
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    /// ψ̄ = φ̄ − q∞x₁.
    IncompressiblePerturbation,
    /// φ̃ with φ = φ̄ + ε²φ̃.
    CompressibleDifference,
}

impl PotentialKind {
    pub fn name(&self) -> &'static str {
        match self {
            PotentialKind::IncompressiblePerturbation => "psi_bar",
            PotentialKind::CompressibleDifference => "phi_tilde",
        }
    }
}

/// Nodal values of a potential on a [`Discretization`].
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    pub kind: PotentialKind,
    pub values: Vec<f64>,
    /// Relative residual reached by the final solve.
    pub residual: f64,
}

impl PotentialField {
    pub fn zeros(kind: PotentialKind, n: usize) -> Self {
        Self {
            kind,
            values: vec![0.0; n],
            residual: 0.0,
        }
    }

    /// Gradient at quadrature point `k` of cell `c`.
    #[inline]
    pub fn gradient(&self, disc: &Discretization, c: usize, k: usize) -> [f64; 2] {
        gradient_at(&disc.local(c, &self.values), &disc.quad[c][k])
    }
}

/// Right-hand side `−q∞ ∫ e₁·∇η` plus the far-field correction.
fn reference_rhs(disc: &Discretization, q_inf: f64, far: FarFieldCondition) -> Vec<f64> {
    let mut rhs = disc.assemble_vector(|_, qps| {
        let mut v = [0.0; 4];
        for q in qps {
            for a in 0..4 {
                v[a] -= q_inf * q.weight * q.grad[a][0];
            }
        }
        v
    });
    if far == FarFieldCondition::Neumann {
        // ∂φ̄/∂n = q∞n₁ on Σ_R so that ∂ψ̄/∂n = 0 there.
        for f in disc.mesh.facets.iter().filter(|f| f.tag == BoundaryTag::FarField) {
            let cell = disc.mesh.cells[f.cell];
            for p in disc.mesh.facet_quadrature(f, &disc.rule) {
                let shape = bilinear_shape(p.xi);
                for a in 0..4 {
                    rhs[cell[a]] += q_inf * p.weight * p.normal[0] * shape[a];
                }
            }
        }
    }
    rhs
}

pub(crate) fn bilinear_shape(xi: [f64; 2]) -> [f64; 4] {
    let (x, e) = (xi[0], xi[1]);
    [
        0.25 * (1.0 - x) * (1.0 - e),
        0.25 * (1.0 + x) * (1.0 - e),
        0.25 * (1.0 + x) * (1.0 + e),
        0.25 * (1.0 - x) * (1.0 + e),
    ]
}

/// Solves `∫ ∇φ̄·∇η = 0` for all admissible η, with φ̄ = ψ̄ + q∞x₁. The
/// slip condition on Γ is the natural boundary condition of this form.
pub fn solve_incompressible(
    disc: &Discretization,
    q_inf: f64,
    far: FarFieldCondition,
) -> Result<PotentialField> {
    if !q_inf.is_finite() || q_inf < 0.0 {
        return Err(Error::Config(format!("q_inf must be non-negative, got {q_inf}")));
    }
    let n = disc.n_nodes();
    let mut k = disc.stiffness();
    let mut rhs = reference_rhs(disc, q_inf, far);
    let mut fixed = match far {
        FarFieldCondition::Dirichlet => disc.boundary_mask(BoundaryTag::FarField),
        FarFieldCondition::Neumann => vec![false; n],
    };
    if far == FarFieldCondition::Neumann {
        // Pin the far-field node on the positive x₂ side (perpendicular to
        // the stream) where the perturbation is smallest.
        let mesh = &disc.mesh;
        let j = mesh.n_t() / 2;
        fixed[mesh.node_index(mesh.n_r(), j)] = true;
    }
    k.constrain_zero(&fixed, &mut rhs);
    let mut values = vec![0.0; n];
    let stats = conjugate_gradient(&k, &rhs, &mut values, LINEAR_TOL, 20 * n + 100)?;
    Ok(PotentialField {
        kind: PotentialKind::IncompressiblePerturbation,
        values,
        residual: stats.relative_residual,
    })
}

/// `ū = ∇ψ̄ + q∞e₁` at every quadrature point.
pub fn velocity(disc: &Discretization, psi_bar: &PotentialField, q_inf: f64) -> VelocityField {
    QuadField::from_fn(disc, |c, k, _| {
        let g = psi_bar.gradient(disc, c, k);
        [g[0] + q_inf, g[1]]
    })
}

/// Largest weak normal flux `|∫_Γ ū·n η_k dS|` over obstacle nodes, computed
/// as the Galerkin residual of the reference problem at those nodes.
pub fn obstacle_flux_residual(disc: &Discretization, psi_bar: &PotentialField, q_inf: f64) -> f64 {
    let r = weak_divergence(disc, psi_bar, q_inf);
    let mask = disc.boundary_mask(BoundaryTag::Obstacle);
    r.iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| v.abs())
        .fold(0.0, f64::max)
}

/// Net flux `∮_Γ ū·n dS`, tested with the function equal to one on Γ and
/// zero outside the first layer of cells.
pub fn net_obstacle_flux(disc: &Discretization, psi_bar: &PotentialField, q_inf: f64) -> f64 {
    let r = weak_divergence(disc, psi_bar, q_inf);
    let mask = disc.boundary_mask(BoundaryTag::Obstacle);
    r.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v).sum()
}

/// Nodal vector `∫ ū·∇η_k`.
fn weak_divergence(disc: &Discretization, psi_bar: &PotentialField, q_inf: f64) -> Vec<f64> {
    disc.assemble_vector(|c, qps| {
        let local = disc.local(c, &psi_bar.values);
        let mut v = [0.0; 4];
        for q in qps {
            let g = gradient_at(&local, q);
            let u = [g[0] + q_inf, g[1]];
            for a in 0..4 {
                v[a] += q.weight * (u[0] * q.grad[a][0] + u[1] * q.grad[a][1]);
            }
        }
        v
    })
}

/// Dirichlet energy `∫ |∇ψ̄|²`.
pub fn energy(disc: &Discretization, psi: &PotentialField) -> f64 {
    disc.integrate(|c, qps| {
        let local = disc.local(c, &psi.values);
        qps.iter()
            .map(|q| {
                let g = gradient_at(&local, q);
                q.weight * (g[0] * g[0] + g[1] * g[1])
            })
            .sum()
    })
}

/// `∇(φ_force − |ū|²/2)` at quadrature points, from the gradient of the
/// L² projection of the scalar.
pub fn incompressible_pressure_grad(
    disc: &Discretization,
    u_bar: &VelocityField,
    force: &ForceField,
) -> Result<VelocityField> {
    let s = disc.l2_project(|c, k| {
        let u = u_bar.at(c, k);
        force.at(c, k).phi - 0.5 * (u[0] * u[0] + u[1] * u[1])
    })?;
    Ok(QuadField::from_fn(disc, |c, _, q| {
        gradient_at(&disc.local(c, &s), q)
    }))
}

/// Speed of the discrete flow at a mesh point, using the gradient of the
/// cell that owns the point.
pub fn speed_at(
    disc: &Discretization,
    psi: &PotentialField,
    q_inf: f64,
    cell: usize,
    xi: [f64; 2],
) -> f64 {
    let (q, _) = disc.mesh.reference_point(cell, xi[0], xi[1]);
    let g = gradient_at(&disc.local(cell, &psi.values), &q);
    (g[0] + q_inf).hypot(g[1])
}

/// Maximum speed over Gauss points on the obstacle facets.
pub fn max_surface_speed(disc: &Discretization, psi: &PotentialField, q_inf: f64) -> f64 {
    disc.mesh
        .facets
        .iter()
        .filter(|f| f.tag == BoundaryTag::Obstacle)
        .flat_map(|f| {
            disc.mesh
                .facet_quadrature(f, &disc.rule)
                .into_iter()
                .map(move |p| speed_at(disc, psi, q_inf, f.cell, p.xi))
        })
        .fold(0.0, f64::max)
}

/// Nodal velocity recovered by L² projection of the cell-wise gradient.
pub fn recovered_velocity(
    disc: &Discretization,
    psi: &PotentialField,
    q_inf: f64,
) -> Result<Vec<[f64; 2]>> {
    let u = velocity(disc, psi, q_inf);
    let u1 = disc.l2_project(|c, k| u.at(c, k)[0])?;
    let u2 = disc.l2_project(|c, k| u.at(c, k)[1])?;
    Ok(u1.into_iter().zip(u2).map(|(a, b)| [a, b]).collect())
}

/// Recovered speeds at the two stagnation points `(±A, 0)`.
pub fn stagnation_speeds(disc: &Discretization, psi: &PotentialField, q_inf: f64) -> Result<[f64; 2]> {
    let mesh = &disc.mesh;
    let back = match mesh.mode() {
        crate::geometry::MeshMode::Axisymmetric3d => mesh.n_t(),
        crate::geometry::MeshMode::Planar2d => mesh.n_t() / 2,
    };
    let u = recovered_velocity(disc, psi, q_inf)?;
    let speed = |n: usize| u[n][0].hypot(u[n][1]);
    Ok([speed(mesh.node_index(0, 0)), speed(mesh.node_index(0, back))])
}

/// Value of the potential at quadrature point `k` of cell `c`.
pub fn potential_at(disc: &Discretization, psi: &PotentialField, c: usize, k: usize) -> f64 {
    value_at(&disc.local(c, &psi.values), &disc.quad[c][k])
}

/// Exact potential and velocity of uniform flow past a sphere of radius `a`
/// centred at the origin, at a point in three dimensions.
pub fn analytic_sphere_reference(a: f64, q_inf: f64, point: [f64; 3]) -> Result<(f64, [f64; 3])> {
    let r2: f64 = point.iter().map(|x| x * x).sum();
    let r = r2.sqrt();
    if r < a * (1.0 - 1e-14) {
        return Err(Error::Domain(format!("point at radius {r} lies inside the sphere of radius {a}")));
    }
    let k = a.powi(3) / (2.0 * r2 * r);
    let phi = q_inf * point[0] * (1.0 + k);
    // ∇[x₁(1 + a³/(2r³))] = (1 + a³/(2r³))e₁ − (3a³/(2r⁵)) x₁ x.
    let c = 3.0 * k * point[0] / r2;
    let u = [
        q_inf * (1.0 + k - c * point[0]),
        -q_inf * c * point[1],
        -q_inf * c * point[2],
    ];
    Ok((phi, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, MeshMode, ObstacleShape};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn disc(n_r: usize, n_t: usize, r_far: f64, grading: f64) -> Discretization {
        Discretization::new(
            build_mesh(
                ObstacleShape::Sphere { radius: 1.0 },
                r_far,
                n_r,
                n_t,
                grading,
                MeshMode::Axisymmetric3d,
            )
            .unwrap(),
        )
    }

    #[test]
    fn analytic_reference_examples() {
        let (_, u) = analytic_sphere_reference(1.0, 1.0, [0.0, 1.0, 0.0]).unwrap();
        assert_relative_eq!(u[0], 1.5, epsilon = 1e-15);
        let (_, u) = analytic_sphere_reference(1.0, 1.0, [1.0, 0.0, 0.0]).unwrap();
        assert!(u.iter().all(|v| v.abs() < 1e-15));
        let (_, u) = analytic_sphere_reference(1.0, 1.0, [1e4, 3e3, 0.0]).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-10 && u[1].abs() < 1e-10);
        assert!(analytic_sphere_reference(1.0, 1.0, [0.5, 0.0, 0.0]).is_err());
        // Gradient against central differences of the potential.
        let x = [1.3, 0.7, 0.4];
        let (_, u) = analytic_sphere_reference(1.0, 2.0, x).unwrap();
        for d in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[d] += 1e-6;
            xm[d] -= 1e-6;
            let fd = (analytic_sphere_reference(1.0, 2.0, xp).unwrap().0
                - analytic_sphere_reference(1.0, 2.0, xm).unwrap().0)
                / 2e-6;
            assert_relative_eq!(u[d], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn sphere_surface_and_stagnation_speeds() {
        let d = disc(48, 48, 20.0, 1.07);
        let psi = solve_incompressible(&d, 1.0, FarFieldCondition::Dirichlet).unwrap();
        assert!(psi.residual <= LINEAR_TOL);
        let top = max_surface_speed(&d, &psi, 1.0);
        assert!((top - 1.5).abs() < 0.03, "max surface speed {top}");
        for s in stagnation_speeds(&d, &psi, 1.0).unwrap() {
            assert!(s < 0.05, "stagnation speed {s}");
        }
        // Dirichlet energy against the exterior value 2πa³q∞²/3.
        assert_relative_eq!(energy(&d, &psi), 2.0 * PI / 3.0, max_relative = 0.02);
    }

    #[test]
    fn zero_stream_and_linearity() {
        let d = disc(10, 10, 10.0, 1.15);
        let zero = solve_incompressible(&d, 0.0, FarFieldCondition::Dirichlet).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
        let one = solve_incompressible(&d, 1.0, FarFieldCondition::Dirichlet).unwrap();
        let two = solve_incompressible(&d, 2.0, FarFieldCondition::Dirichlet).unwrap();
        let scale = one.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for (a, b) in one.values.iter().zip(&two.values) {
            assert!((2.0 * a - b).abs() < 1e-8 * scale);
        }
    }

    #[test]
    fn weak_slip_and_zero_net_flux() {
        let d = disc(16, 16, 10.0, 1.15);
        let psi = solve_incompressible(&d, 1.0, FarFieldCondition::Dirichlet).unwrap();
        assert!(obstacle_flux_residual(&d, &psi, 1.0) < 1e-8);
        assert!(net_obstacle_flux(&d, &psi, 1.0).abs() < 1e-8);
    }

    #[test]
    fn far_field_symmetry_and_decay() {
        let r_far = 20.0;
        let d = disc(32, 32, r_far, 1.1);
        let psi = solve_incompressible(&d, 1.0, FarFieldCondition::Dirichlet).unwrap();
        let u = velocity(&d, &psi, 1.0);
        for c in 0..d.mesh.cells.len() {
            for (k, q) in d.quad[c].iter().enumerate() {
                let r = q.x[0].hypot(q.x[1]);
                if r > 0.9 * r_far {
                    let v = u.at(c, k);
                    assert!((v[0] - 1.0).hypot(v[1]) < 0.01);
                }
            }
        }
        // Reflection x₁ → −x₁: ψ̄ is odd, so ū₁ is even and ū₂ odd.
        for (k, v) in psi.values.iter().enumerate() {
            let m = psi.values[d.mesh.mirror_node(k)];
            assert!((v + m).abs() < 1e-9);
        }
        // |∇ψ̄|(1+r)^{3/2} stays bounded along rays.
        for theta in [0.3, PI / 2.0, 2.5] {
            let profile: Vec<f64> = (0..40)
                .map(|i| 1.05 * (0.8 * r_far / 1.05_f64).powf(i as f64 / 39.0))
                .map(|r| {
                    let (_, g) =
                        crate::fem::evaluate(&d.mesh, &psi.values, [r * theta.cos(), r * theta.sin()]).unwrap();
                    g[0].hypot(g[1]) * (1.0 + r).powf(1.5)
                })
                .collect();
            let bound = profile[0].max(1.0);
            assert!(profile.iter().all(|p| *p <= 2.0 * bound), "{profile:?}");
        }
    }

    #[test]
    fn energy_stable_under_refinement_and_truncation() {
        let base = {
            let d = disc(24, 24, 20.0, 1.12);
            energy(&d, &solve_incompressible(&d, 1.0, FarFieldCondition::Dirichlet).unwrap())
        };
        let fine = {
            let d = disc(48, 48, 20.0, 1.0583);
            energy(&d, &solve_incompressible(&d, 1.0, FarFieldCondition::Dirichlet).unwrap())
        };
        let far = {
            let d = disc(28, 24, 40.0, 1.12);
            energy(&d, &solve_incompressible(&d, 1.0, FarFieldCondition::Dirichlet).unwrap())
        };
        assert!((fine - base).abs() / fine < 0.01, "{base} vs {fine}");
        assert!((far - base).abs() / base < 0.01, "{base} vs {far}");
    }

    #[test]
    fn neumann_far_field_is_close_to_dirichlet() {
        let d = disc(24, 24, 20.0, 1.12);
        let a = solve_incompressible(&d, 1.0, FarFieldCondition::Dirichlet).unwrap();
        let b = solve_incompressible(&d, 1.0, FarFieldCondition::Neumann).unwrap();
        let sa = max_surface_speed(&d, &a, 1.0);
        let sb = max_surface_speed(&d, &b, 1.0);
        assert!((sa - sb).abs() < 0.01, "{sa} vs {sb}");
    }

    #[test]
    fn maximum_principle() {
        let d = disc(12, 12, 10.0, 1.15);
        let psi = solve_incompressible(&d, 1.0, FarFieldCondition::Dirichlet).unwrap();
        let arg = |better: fn(f64, f64) -> bool| {
            (0..psi.values.len())
                .reduce(|a, b| if better(psi.values[b], psi.values[a]) { b } else { a })
                .unwrap()
        };
        let boundary = disc_boundary(&d);
        assert!(boundary.contains(&arg(|a, b| a > b)));
        assert!(boundary.contains(&arg(|a, b| a < b)));
    }

    fn disc_boundary(d: &Discretization) -> Vec<usize> {
        let mut nodes: Vec<usize> = d.mesh.facets.iter().flat_map(|f| f.nodes).collect();
        nodes.sort_unstable();
        nodes.dedup();
        nodes
    }

    #[test]
    fn pressure_gradient_examples() {
        let d = disc(16, 16, 10.0, 1.15);
        let uniform = QuadField::filled(&d, [1.0, 0.0]);
        let none = QuadField::filled(&d, ForceValue::ZERO);
        let g = incompressible_pressure_grad(&d, &uniform, &none).unwrap();
        assert!(g.data.iter().all(|v| v[0].abs() < 1e-8 && v[1].abs() < 1e-8));
        let linear = QuadField::from_fn(&d, |_, _, q| ForceValue {
            phi: 0.3 * q.x[0],
            grad_phi: [0.3, 0.0],
        });
        let g = incompressible_pressure_grad(&d, &uniform, &linear).unwrap();
        let err = g.data.iter().fold(0.0_f64, |m, v| m.max((v[0] - 0.3).abs().max(v[1].abs())));
        assert!(err < 0.1 * 0.3, "{err}");
    }

    #[test]
    fn sphere_surface_pressure_gradient() {
        // −|ū|²/2 on the surface is −(9/8)q∞² sin²θ; its θ-derivative is
        // −(9/4) sinθ cosθ.
        let d = disc(40, 40, 20.0, 1.08);
        let psi = solve_incompressible(&d, 1.0, FarFieldCondition::Dirichlet).unwrap();
        let u = velocity(&d, &psi, 1.0);
        let none = QuadField::filled(&d, ForceValue::ZERO);
        let g = incompressible_pressure_grad(&d, &u, &none).unwrap();
        let mut worst = 0.0_f64;
        for j in 0..d.mesh.n_t() {
            let c = d.mesh.cell_index(0, j);
            // Innermost Gauss row of the first layer.
            let k = 1;
            let q = &d.quad[c][k];
            let th = q.x[1].atan2(q.x[0]);
            let r = q.x[0].hypot(q.x[1]);
            let tangent = [-th.sin(), th.cos()];
            let gt = g.at(c, k)[0] * tangent[0] + g.at(c, k)[1] * tangent[1];
            // Exact tangential derivative at radius r, θ.
            let k3 = 1.0 / (2.0 * r.powi(3));
            let ur = th.cos() * (1.0 - 2.0 * k3);
            let ut = -th.sin() * (1.0 + k3);
            let d_ur = -th.sin() * (1.0 - 2.0 * k3);
            let d_ut = -th.cos() * (1.0 + k3);
            let exact = -(ur * d_ur + ut * d_ut) / r;
            worst = worst.max((gt - exact).abs());
        }
        assert!(worst < 0.1, "tangential pressure gradient error {worst}");
    }
}
