//! Conservative body forces: Newtonian potentials of sources inside the
//! obstacle, closed-form profiles, and the admissibility check.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{Discretization, QuadField};
use crate::gas::ForceValue;
use crate::geometry::{BoundaryTag, MeshMode, ObstacleShape};
use crate::incompressible::ForceField;
use crate::lab::fit::fit_rate;
use crate::quadrature::GaussRule;

/// Mass distribution generating a Newtonian potential `φ(x) = Σ m_i/|x − y_i|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceModel {
    /// Point mass on the symmetry axis at `x₁ = center`.
    PointMass { mass: f64, center: f64 },
    /// Uniform ball centred at the origin, sampled by Gauss rules in radius
    /// and polar cosine and a uniform azimuthal rule.
    UniformBall {
        mass: f64,
        radius: f64,
        #[serde(default = "default_radial_points")]
        radial_points: usize,
        #[serde(default = "default_polar_points")]
        polar_points: usize,
        #[serde(default = "default_azimuth_points")]
        azimuth_points: usize,
    },
    /// Explicit three-dimensional sample points with masses.
    Samples { points: Vec<[f64; 3]>, masses: Vec<f64> },
}

fn default_radial_points() -> usize {
    6
}
fn default_polar_points() -> usize {
    12
}
fn default_azimuth_points() -> usize {
    24
}

/// Closed-form force potentials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalyticProfile {
    /// `φ = c x₁`.
    Linear { slope: f64 },
    /// `φ = m / √(|x|² + s²)`.
    Softened { mass: f64, softening: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceKind {
    None,
    Newtonian,
    Analytic,
}

/// A force with its declared admissibility exponents `(β, q)`. A Newtonian
/// force carries `source`, an analytic one `profile`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceSpec {
    pub kind: ForceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<AnalyticProfile>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_q")]
    pub q: f64,
}

fn default_beta() -> f64 {
    1.2
}
fn default_q() -> f64 {
    4.0
}

impl Default for ForceSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl ForceSpec {
    pub fn none() -> Self {
        Self {
            kind: ForceKind::None,
            source: None,
            profile: None,
            beta: default_beta(),
            q: default_q(),
        }
    }

    pub fn newtonian(source: SourceModel) -> Self {
        Self {
            kind: ForceKind::Newtonian,
            source: Some(source),
            ..Self::none()
        }
    }

    pub fn point_mass(mass: f64) -> Self {
        Self::newtonian(SourceModel::PointMass { mass, center: 0.0 })
    }

    pub fn analytic(profile: AnalyticProfile) -> Self {
        Self {
            kind: ForceKind::Analytic,
            profile: Some(profile),
            ..Self::none()
        }
    }

    pub fn is_zero(&self) -> bool {
        self.kind == ForceKind::None
    }

    /// Checks that exactly the data required by `kind` is present.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ForceKind::None => self.source.is_none() && self.profile.is_none(),
            ForceKind::Newtonian => self.source.is_some() && self.profile.is_none(),
            ForceKind::Analytic => self.profile.is_some() && self.source.is_none(),
        };
        if !ok {
            return Err(Error::Config(format!(
                "force.kind {:?} needs {}",
                self.kind,
                match self.kind {
                    ForceKind::None => "neither force.source nor force.profile",
                    ForceKind::Newtonian => "force.source and no force.profile",
                    ForceKind::Analytic => "force.profile and no force.source",
                }
            )));
        }
        if !(self.beta.is_finite() && self.q.is_finite()) {
            return Err(Error::Config("force.beta and force.q must be finite".into()));
        }
        Ok(())
    }
}

/// A force ready for evaluation at arbitrary points.
#[derive(Debug, Clone)]
pub struct ForceEvaluator {
    kind: EvalKind,
    mode: MeshMode,
}

#[derive(Debug, Clone)]
enum EvalKind {
    Zero,
    Sources { points: Vec<[f64; 3]>, masses: Vec<f64> },
    Analytic(AnalyticProfile),
}

impl ForceEvaluator {
    /// Prepares `spec` for the geometry of `disc`, checking that any source
    /// lies strictly inside the obstacle.
    pub fn new(spec: &ForceSpec, shape: ObstacleShape, mode: MeshMode) -> Result<Self> {
        spec.validate()?;
        let kind = match (spec.kind, &spec.source, &spec.profile) {
            (ForceKind::Analytic, _, Some(profile)) => {
                if let AnalyticProfile::Softened { softening, .. } = profile {
                    if !(*softening > 0.0) {
                        return Err(Error::Config("force.profile.softening must be positive".into()));
                    }
                }
                EvalKind::Analytic(*profile)
            }
            (ForceKind::Newtonian, Some(source), _) => {
                if mode != MeshMode::Axisymmetric3d {
                    return Err(Error::Config(
                        "force.kind newtonian requires geometry.mode axisymmetric-3d".into(),
                    ));
                }
                let (points, masses) = sample_source(source)?;
                let (a, b) = shape.semi_axes();
                for p in &points {
                    let r2 = p[1] * p[1] + p[2] * p[2];
                    if p[0] * p[0] / (a * a) + r2 / (b * b) >= 1.0 {
                        return Err(Error::Config(format!(
                            "force.source sample {p:?} is not strictly inside the obstacle"
                        )));
                    }
                }
                if masses.iter().any(|m| !m.is_finite()) {
                    return Err(Error::Config("force.source masses must be finite".into()));
                }
                EvalKind::Sources { points, masses }
            }
            _ => EvalKind::Zero,
        };
        Ok(Self { kind, mode })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, EvalKind::Zero)
    }

    /// Potential and in-plane gradient at a point of the computational plane.
    pub fn eval(&self, x: [f64; 2]) -> ForceValue {
        match &self.kind {
            EvalKind::Zero => ForceValue::ZERO,
            EvalKind::Analytic(AnalyticProfile::Linear { slope }) => ForceValue {
                phi: slope * x[0],
                grad_phi: [*slope, 0.0],
            },
            EvalKind::Analytic(AnalyticProfile::Softened { mass, softening }) => {
                let s2 = x[0] * x[0] + x[1] * x[1] + softening * softening;
                let phi = mass / s2.sqrt();
                let k = -phi / s2;
                ForceValue {
                    phi,
                    grad_phi: [k * x[0], k * x[1]],
                }
            }
            EvalKind::Sources { points, masses } => {
                // The plane point (x₁, x₂) is the 3-D point (x₁, x₂, 0).
                let mut phi = 0.0;
                let mut g = [0.0; 2];
                for (y, m) in points.iter().zip(masses) {
                    let d = [x[0] - y[0], x[1] - y[1], -y[2]];
                    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    let r = r2.sqrt();
                    let v = m / r;
                    phi += v;
                    let k = -v / r2;
                    g[0] += k * d[0];
                    g[1] += k * d[1];
                }
                ForceValue { phi, grad_phi: g }
            }
        }
    }

    pub fn mode(&self) -> MeshMode {
        self.mode
    }
}

fn sample_source(source: &SourceModel) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    match source {
        SourceModel::PointMass { mass, center } => Ok((vec![[*center, 0.0, 0.0]], vec![*mass])),
        SourceModel::UniformBall {
            mass,
            radius,
            radial_points,
            polar_points,
            azimuth_points,
        } => {
            if !(*radius > 0.0) || *radial_points == 0 || *polar_points == 0 || *azimuth_points == 0 {
                return Err(Error::Config("force.source ball needs positive radius and point counts".into()));
            }
            let density = mass / (4.0 / 3.0 * PI * radius.powi(3));
            let rr = GaussRule::new(*radial_points);
            let rm = GaussRule::new(*polar_points);
            let dphi = 2.0 * PI / *azimuth_points as f64;
            let mut pts = Vec::new();
            let mut ms = Vec::new();
            for (xr, wr) in rr.nodes.iter().zip(&rr.weights) {
                let r = 0.5 * radius * (xr + 1.0);
                let wr = 0.5 * radius * wr * r * r;
                for (mu, wm) in rm.nodes.iter().zip(&rm.weights) {
                    let st = (1.0 - mu * mu).sqrt();
                    for k in 0..*azimuth_points {
                        let az = (k as f64 + 0.5) * dphi;
                        pts.push([r * mu, r * st * az.cos(), r * st * az.sin()]);
                        ms.push(density * wr * wm * dphi);
                    }
                }
            }
            Ok((pts, ms))
        }
        SourceModel::Samples { points, masses } => {
            if points.len() != masses.len() || points.is_empty() {
                return Err(Error::Config(
                    "force.source samples need equally many points and masses".into(),
                ));
            }
            Ok((points.clone(), masses.clone()))
        }
    }
}

/// Force potential and gradient at every quadrature point of `disc`.
pub fn newtonian_potential(spec: &ForceSpec, disc: &Discretization) -> Result<ForceField> {
    let ev = ForceEvaluator::new(spec, disc.mesh.params.shape, disc.mesh.mode())?;
    Ok(force_field(&ev, disc))
}

pub fn force_field(ev: &ForceEvaluator, disc: &Discretization) -> ForceField {
    if ev.is_zero() {
        return QuadField::filled(disc, ForceValue::ZERO);
    }
    QuadField::from_fn(disc, |_, _, q| ev.eval(q.x))
}

/// Outcome of the admissibility check `(1+|x|^β)∇φ ∈ L^q` with `φ` bounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceVerdict {
    pub admissible: bool,
    pub gradient_condition_finite: bool,
    pub phi_bounded: bool,
    /// Reported separately: a Newtonian potential in three dimensions decays
    /// like 1/r and is not square integrable.
    pub phi_l2_finite: bool,
    pub phi_star: f64,
    pub phi_l2_truncated: f64,
    /// `None` when the tail diverges.
    pub phi_l2_tail: Option<f64>,
    pub weighted_gradient_truncated: f64,
    pub weighted_gradient_tail: Option<f64>,
    /// Fitted `k` in `|∇φ| ~ r^{−k}`.
    pub gradient_decay: Option<f64>,
    /// Fitted `j` in `|φ| ~ r^{−j}`.
    pub potential_decay: Option<f64>,
    /// Radial exponent `qβ − qk + n − 1` of the weighted-gradient tail.
    pub tail_exponent: Option<f64>,
    pub beta: f64,
    pub q: f64,
    pub dimension: usize,
    pub beta_prime: f64,
    pub mode: String,
}

/// `β′ = min(n/2, β + n/q − 1)`.
pub fn beta_prime(n: usize, beta: f64, q: f64) -> f64 {
    (n as f64 / 2.0).min(beta + n as f64 / q - 1.0)
}

/// Integrates the admissibility quantities on the truncated domain and
/// extrapolates the radial tails with the fitted decay exponents.
pub fn validate_force(ev: &ForceEvaluator, beta: f64, q: f64, disc: &Discretization) -> Result<ForceVerdict> {
    let mode = disc.mesh.mode();
    let n = mode.dimension();
    let nf = n as f64;
    if !(q > nf) {
        return Err(Error::Config(format!("force.q must exceed the dimension {n}, got {q}")));
    }
    if !(beta > 1.0 - nf / q) {
        return Err(Error::Config(format!(
            "force.beta must exceed 1 - n/q = {}, got {beta}",
            1.0 - nf / q
        )));
    }
    let weight = |x: [f64; 2], g: [f64; 2]| {
        let r = x[0].hypot(x[1]);
        ((1.0 + r.powf(beta)) * g[0].hypot(g[1])).powf(q)
    };
    let parts: Vec<(f64, f64, f64)> = (0..disc.mesh.cells.len())
        .into_par_iter()
        .map(|c| {
            let mut s = (0.0, 0.0, 0.0_f64);
            for qp in &disc.quad[c] {
                let f = ev.eval(qp.x);
                s.0 += qp.weight * f.phi * f.phi;
                s.1 += qp.weight * weight(qp.x, f.grad_phi);
                s.2 = s.2.max(f.phi.abs());
            }
            s
        })
        .collect();
    let (mut phi_l2, mut grad_int, mut phi_star) = (0.0, 0.0, 0.0_f64);
    for (a, b, m) in parts {
        phi_l2 += a;
        grad_int += b;
        phi_star = phi_star.max(m);
    }
    // The potential on Γ itself (the mesh nodes) also bounds φ⋆.
    for x in &disc.mesh.nodes {
        phi_star = phi_star.max(ev.eval(*x).phi.abs());
    }
    let mut verdict = ForceVerdict {
        admissible: true,
        gradient_condition_finite: true,
        phi_bounded: phi_star.is_finite(),
        phi_l2_finite: true,
        phi_star,
        phi_l2_truncated: phi_l2,
        phi_l2_tail: Some(0.0),
        weighted_gradient_truncated: grad_int,
        weighted_gradient_tail: Some(0.0),
        gradient_decay: None,
        potential_decay: None,
        tail_exponent: None,
        beta,
        q,
        dimension: n,
        beta_prime: beta_prime(n, beta, q),
        mode: mode.label().to_string(),
    };
    if ev.is_zero() {
        return Ok(verdict);
    }
    let r_far = disc.mesh.params.r_far;
    let k = fitted_decay(ev, r_far, |f| f.grad_phi[0].hypot(f.grad_phi[1]), mode)?;
    let j = fitted_decay(ev, r_far, |f| f.phi.abs(), mode)?;
    verdict.gradient_decay = k;
    verdict.potential_decay = j;
    // Surface integrals over Σ_R give the radial densities at R.
    let mut sigma_phi = 0.0;
    let mut sigma_grad = 0.0;
    for f in disc.mesh.facets.iter().filter(|f| f.tag == BoundaryTag::FarField) {
        for p in disc.mesh.facet_quadrature(f, &disc.rule) {
            let v = ev.eval(p.x);
            sigma_phi += p.weight * v.phi * v.phi;
            sigma_grad += p.weight * weight(p.x, v.grad_phi);
        }
    }
    let tail = |density: f64, exponent: Option<f64>| -> Option<f64> {
        match exponent {
            None => Some(0.0),
            Some(e) if e < -1.0 => Some(density * r_far / (-e - 1.0)),
            Some(_) => None,
        }
    };
    // A field that does not decay (k ≤ 0) has a radial density growing like
    // r^{qβ + n − 1}; the decay exponent enters with the power q.
    let grad_exp = k.map(|k| q * beta - q * k + nf - 1.0).or(Some(q * beta + nf - 1.0));
    let phi_exp = j.map(|j| -2.0 * j + nf - 1.0).or(Some(nf - 1.0));
    verdict.tail_exponent = grad_exp;
    verdict.weighted_gradient_tail = if sigma_grad == 0.0 { Some(0.0) } else { tail(sigma_grad, grad_exp) };
    verdict.phi_l2_tail = if sigma_phi == 0.0 { Some(0.0) } else { tail(sigma_phi, phi_exp) };
    verdict.gradient_condition_finite = verdict.weighted_gradient_tail.is_some();
    verdict.phi_l2_finite = verdict.phi_l2_tail.is_some();
    // A non-decaying potential is unbounded on the exterior domain.
    verdict.phi_bounded = phi_star.is_finite() && j.is_none_or(|j| j >= 0.0);
    verdict.admissible = verdict.gradient_condition_finite && verdict.phi_bounded;
    Ok(verdict)
}

/// Decay exponent of `|f|` along three rays over `[R/8, R]`; `None` when the
/// quantity vanishes there.
fn fitted_decay<F>(ev: &ForceEvaluator, r_far: f64, f: F, mode: MeshMode) -> Result<Option<f64>>
where
    F: Fn(&ForceValue) -> f64,
{
    let rays: &[f64] = match mode {
        MeshMode::Axisymmetric3d => &[0.4, PI / 2.0, 2.5],
        MeshMode::Planar2d => &[0.4, PI / 2.0, 2.5, 4.0],
    };
    let mut worst: Option<f64> = None;
    for &th in rays {
        let pairs: Vec<(f64, f64)> = (0..16)
            .map(|i| {
                let r = r_far / 8.0 * 8f64.powf(i as f64 / 15.0);
                (r, f(&ev.eval([r * th.cos(), r * th.sin()])))
            })
            .collect();
        if pairs.iter().all(|(_, v)| *v == 0.0) {
            continue;
        }
        if pairs.iter().any(|(_, v)| !(*v > 0.0)) {
            // Sign changes along the ray: treat as non-decaying.
            worst = Some(worst.map_or(0.0, |w: f64| w.min(0.0)));
            continue;
        }
        let fit = fit_rate(&pairs)?;
        let k = -fit.slope;
        worst = Some(worst.map_or(k, |w| w.min(k)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_mesh;
    use approx::assert_relative_eq;

    fn sphere() -> ObstacleShape {
        ObstacleShape::Sphere { radius: 1.0 }
    }

    fn disc(r_far: f64) -> Discretization {
        Discretization::new(build_mesh(sphere(), r_far, 24, 16, 1.15, MeshMode::Axisymmetric3d).unwrap())
    }

    #[test]
    fn point_mass_examples() {
        let ev = ForceEvaluator::new(&ForceSpec::point_mass(2.0), sphere(), MeshMode::Axisymmetric3d).unwrap();
        let f = ev.eval([2.0, 0.0]);
        assert_relative_eq!(f.phi, 1.0, epsilon = 1e-15);
        assert_relative_eq!(f.grad_phi[0].hypot(f.grad_phi[1]), 0.5, epsilon = 1e-15);
        let far = ev.eval([3e3, 4e3]);
        assert_relative_eq!(5e3 * far.phi, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_ball_obeys_shell_theorem() {
        let spec = ForceSpec::newtonian(SourceModel::UniformBall {
            mass: 0.7,
            radius: 0.8,
            radial_points: 8,
            polar_points: 24,
            azimuth_points: 32,
        });
        let ev = ForceEvaluator::new(&spec, sphere(), MeshMode::Axisymmetric3d).unwrap();
        for x in [[1.0, 0.0], [0.0, 1.0], [0.7, 0.7], [5.0, 3.0]] {
            let r = f64::hypot(x[0], x[1]);
            let f = ev.eval(x);
            assert!((f.phi - 0.7 / r).abs() < 1e-4 * 0.7 / r, "{x:?}: {}", f.phi);
            let g = f.grad_phi[0].hypot(f.grad_phi[1]);
            assert!((g - 0.7 / (r * r)).abs() < 1e-4 * 0.7 / (r * r), "{x:?}: {g} {}", (g - 0.7 / (r * r)) / (0.7 / (r * r)));
        }
    }

    #[test]
    fn sources_outside_the_obstacle_are_rejected() {
        let spec = ForceSpec::newtonian(SourceModel::PointMass { mass: 1.0, center: 1.5 });
        assert!(ForceEvaluator::new(&spec, sphere(), MeshMode::Axisymmetric3d).is_err());
        assert!(ForceEvaluator::new(&ForceSpec::point_mass(1.0), sphere(), MeshMode::Planar2d).is_err());
    }

    #[test]
    fn verdict_examples() {
        let d = disc(20.0);
        let newton = ForceEvaluator::new(&ForceSpec::point_mass(0.05), sphere(), MeshMode::Axisymmetric3d).unwrap();
        let v = validate_force(&newton, 1.2, 4.0, &d).unwrap();
        assert!(v.admissible && v.gradient_condition_finite && v.phi_bounded);
        assert!(!v.phi_l2_finite);
        assert_relative_eq!(v.beta_prime, 0.95, epsilon = 1e-12);
        assert_relative_eq!(v.gradient_decay.unwrap(), 2.0, epsilon = 1e-9);
        assert_relative_eq!(v.tail_exponent.unwrap(), -1.2, epsilon = 1e-8);
        assert_relative_eq!(v.phi_star, 0.05, epsilon = 1e-12);

        let v = validate_force(&newton, 2.0, 4.0, &d).unwrap();
        assert!(!v.admissible && !v.gradient_condition_finite);
        assert_relative_eq!(v.tail_exponent.unwrap(), 2.0, epsilon = 1e-8);

        let zero = ForceEvaluator::new(&ForceSpec::none(), sphere(), MeshMode::Axisymmetric3d).unwrap();
        let v = validate_force(&zero, 1.2, 4.0, &d).unwrap();
        assert!(v.admissible);
        assert_eq!(v.phi_l2_truncated, 0.0);
        assert_eq!(v.weighted_gradient_truncated, 0.0);
        assert_eq!(v.phi_star, 0.0);

        assert!(validate_force(&newton, 1.2, 2.5, &d).is_err());
        assert!(validate_force(&newton, -0.5, 4.0, &d).is_err());
    }

    #[test]
    fn tail_extrapolation_matches_longer_domain() {
        // Truncated integral at R plus tail ≈ truncated integral at 2R plus
        // its tail, for the convergent weighted-gradient quantity.
        let ev = ForceEvaluator::new(&ForceSpec::point_mass(0.05), sphere(), MeshMode::Axisymmetric3d).unwrap();
        let a = validate_force(&ev, 1.2, 4.0, &disc(20.0)).unwrap();
        let b = validate_force(&ev, 1.2, 4.0, &disc(40.0)).unwrap();
        let ta = a.weighted_gradient_truncated + a.weighted_gradient_tail.unwrap();
        let tb = b.weighted_gradient_truncated + b.weighted_gradient_tail.unwrap();
        assert_relative_eq!(ta, tb, max_relative = 0.02);
    }

    #[test]
    fn linear_profile_is_inadmissible() {
        let spec = ForceSpec::analytic(AnalyticProfile::Linear { slope: 0.01 });
        let ev = ForceEvaluator::new(&spec, sphere(), MeshMode::Axisymmetric3d).unwrap();
        let v = validate_force(&ev, 1.2, 4.0, &disc(10.0)).unwrap();
        assert!(!v.admissible);
    }

    #[test]
    fn force_spec_json_round_trip() {
        let spec = ForceSpec::newtonian(SourceModel::UniformBall {
            mass: 0.05,
            radius: 0.5,
            radial_points: 4,
            polar_points: 8,
            azimuth_points: 16,
        });
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ForceSpec>(&s).unwrap(), spec);
        let parsed: ForceSpec = serde_json::from_str(r#"{"kind":"none"}"#).unwrap();
        assert!(parsed.is_zero());
        assert!(serde_json::from_str::<ForceSpec>(r#"{"kind":"none","mass":1}"#).is_err());
        let missing: ForceSpec = serde_json::from_str(r#"{"kind":"newtonian"}"#).unwrap();
        assert!(missing.validate().is_err());
    }
}
