//! Minimisation of the compressible–incompressible difference functional
//! and reconstruction of the compressible flow.
//!
//! The unknown is φ̃ with φ = φ̄ + ε²φ̃. Writing `p̄ = ∇φ̄`, `d = ∇φ̃` and
//! `p = p̄ + ε²d`, the integrand of the functional is evaluated as
//!
//! `(ρ̂(Λ̄)−1)/ε² p̄·d + ½ρ̂(Λ̄)|d|² + ½δ ∫₀¹ (ρ̂(Λ̄+sε²δ) − ρ̂(Λ̄))/ε² ds`
//!
//! with `Λ̄ = |p̄|²` and `δ = 2p̄·d + ε²|d|²`, which has no ε⁻⁴ cancellation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::{
    conjugate_gradient, dot, gradient_at, norm, CsrMatrix, Discretization, QuadField,
};
use crate::gas::{
    density_from_speed, enthalpy, mach, truncated_excess, CutoffSpec, CutoffWindow,
    EllipticityBounds, ForceValue, GasModel,
};
use crate::geometry::{BoundaryTag, MeshMode};
use crate::incompressible::{
    velocity, FarFieldCondition, ForceField, PotentialField, PotentialKind, VelocityField,
};
use crate::quadrature::GaussRule;

/// Default Gauss order of the inner density integral.
pub const INNER_GAUSS_POINTS: usize = 8;
/// Default relative gradient tolerance of the Newton iteration.
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 60;
const ARMIJO_C: f64 = 1e-4;
pub const MAX_BACKTRACKS: usize = 40;
const HESSIAN_CG_TOL: f64 = 1e-12;

/// Cut-off parameters `(θ, ε₀)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffParams {
    pub theta: f64,
    pub eps0: f64,
}

impl Default for CutoffParams {
    fn default() -> Self {
        Self {
            theta: 0.7,
            eps0: 0.45,
        }
    }
}

/// Stopping rule and iteration limits of the Newton minimiser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonSettings {
    /// Relative gradient-norm target.
    pub tol: f64,
    pub max_newton: usize,
    pub max_backtracks: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            tol: NEWTON_TOL,
            max_newton: NEWTON_MAX_ITER,
            max_backtracks: MAX_BACKTRACKS,
        }
    }
}

/// Everything needed to evaluate the functional for one ε.
#[derive(Debug, Clone)]
pub struct CompressibleProblem<'a> {
    pub disc: &'a Discretization,
    pub gas: GasModel,
    pub spec: CutoffSpec,
    pub bounds: EllipticityBounds,
    pub far: FarFieldCondition,
    pub psi_bar: &'a PotentialField,
    pub u_bar: VelocityField,
    pub force: ForceField,
    windows: QuadField<CutoffWindow>,
    /// `(ρ̂(|p̄|²) − 1)/ε²` at quadrature points.
    bar_excess: QuadField<f64>,
    inner: GaussRule,
    fixed: Vec<bool>,
    /// Magnitude of the terms summed into the gradient; sets the level below
    /// which gradient norms are rounding noise.
    gradient_scale: f64,
}

impl<'a> CompressibleProblem<'a> {
    pub fn new(
        disc: &'a Discretization,
        psi_bar: &'a PotentialField,
        force: ForceField,
        gas: GasModel,
        cutoff: CutoffParams,
        far: FarFieldCondition,
    ) -> Result<Self> {
        let phi_samples: Vec<f64> = force.data.iter().map(|f| f.phi).collect();
        let spec = CutoffSpec::new(cutoff.theta, cutoff.eps0, &gas, &phi_samples)?;
        let phi_star = phi_samples.iter().fold(0.0_f64, |m, p| m.max(p.abs()));
        let bounds = EllipticityBounds::compute(&spec, phi_star)?;
        let windows = if phi_samples.iter().all(|p| *p == phi_samples[0]) {
            QuadField::filled(disc, spec.window(phi_samples.first().copied().unwrap_or(0.0))?)
        } else {
            let per: Vec<Result<CutoffWindow>> = {
                use rayon::prelude::*;
                phi_samples.par_iter().map(|p| spec.window(*p)).collect()
            };
            QuadField {
                points_per_cell: force.points_per_cell,
                data: per.into_iter().collect::<Result<Vec<_>>>()?,
            }
        };
        let u_bar = velocity(disc, psi_bar, gas.q_inf);
        let e2 = gas.epsilon * gas.epsilon;
        let mut bar_excess = QuadField::filled(disc, 0.0);
        for i in 0..bar_excess.data.len() {
            let p = u_bar.data[i];
            bar_excess.data[i] = truncated_excess(p[0] * p[0] + p[1] * p[1], &windows.data[i], &gas)? / e2;
        }
        let fixed = constrained_nodes(disc, far);
        let nq = u_bar.points_per_cell;
        let scale_vec = disc.assemble_vector(|c, qps| {
            let mut v = [0.0; 4];
            for (k, q) in qps.iter().enumerate() {
                let i = c * nq + k;
                let p = u_bar.data[i];
                let m = p[0].hypot(p[1]) * (1.0 + bar_excess.data[i].abs());
                for a in 0..4 {
                    v[a] += q.weight * m * q.grad[a][0].hypot(q.grad[a][1]);
                }
            }
            v
        });
        let gradient_scale = norm(&scale_vec);
        Ok(Self {
            disc,
            gas,
            spec,
            bounds,
            far,
            psi_bar,
            u_bar,
            force,
            windows,
            bar_excess,
            inner: GaussRule::new(INNER_GAUSS_POINTS),
            fixed,
            gradient_scale,
        })
    }

    /// Uses an `n`-point Gauss rule for the inner density integral.
    pub fn with_inner_order(mut self, n: usize) -> Self {
        self.inner = GaussRule::new(n);
        self
    }

    pub fn epsilon(&self) -> f64 {
        self.gas.epsilon
    }

    pub fn constrained(&self) -> &[bool] {
        &self.fixed
    }

    /// `∫₀¹ (ρ̂(Λ̄+sε²δ) − ρ̂(Λ̄))/ε² ds`, split at the cut-off break points.
    fn inner_integral(&self, i: usize, lam_bar: f64, delta: f64) -> Result<f64> {
        let e2 = self.gas.epsilon * self.gas.epsilon;
        let w = &self.windows.data[i];
        let base = self.bar_excess.data[i];
        let span = e2 * delta;
        let mut cuts = vec![0.0];
        for b in w.breakpoints() {
            let s = (b - lam_bar) / span;
            if s > 0.0 && s < 1.0 {
                cuts.push(s);
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.push(1.0);
        let mut total = 0.0;
        for pair in cuts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, wt) in self.inner.nodes.iter().zip(&self.inner.weights) {
                let s = mid + half * x;
                let lam = (lam_bar + s * span).max(0.0);
                total += half * wt * (truncated_excess(lam, w, &self.gas)? / e2 - base);
            }
        }
        Ok(total)
    }

    /// Integrand of the scaled functional at flat quadrature index `i`.
    fn integrand(&self, i: usize, d: [f64; 2]) -> Result<f64> {
        let e2 = self.gas.epsilon * self.gas.epsilon;
        let pb = self.u_bar.data[i];
        let lam_bar = pb[0] * pb[0] + pb[1] * pb[1];
        let pd = pb[0] * d[0] + pb[1] * d[1];
        let dd = d[0] * d[0] + d[1] * d[1];
        let base = self.bar_excess.data[i];
        let delta = 2.0 * pd + e2 * dd;
        let mut val = base * pd + 0.5 * (1.0 + e2 * base) * dd;
        if delta != 0.0 {
            val += 0.5 * delta * self.inner_integral(i, lam_bar, delta)?;
        }
        Ok(val)
    }

    /// Discrete value of the difference functional at nodal values `phi`.
    pub fn discrete_functional(&self, phi: &[f64]) -> Result<f64> {
        let nq = self.u_bar.points_per_cell;
        let parts: Vec<Result<f64>> = {
            use rayon::prelude::*;
            (0..self.disc.mesh.cells.len())
                .into_par_iter()
                .map(|c| {
                    let local = self.disc.local(c, phi);
                    let mut s = 0.0;
                    for (k, q) in self.disc.quad[c].iter().enumerate() {
                        s += q.weight * self.integrand(c * nq + k, gradient_at(&local, q))?;
                    }
                    Ok(s)
                })
                .collect()
        };
        let mut total = 0.0;
        for p in parts {
            total += p?;
        }
        Ok(total)
    }

    /// `(ρ̂(|p|²) − 1)/ε² p + d` at flat index `i`, the weak flux of the
    /// first variation.
    fn flux(&self, i: usize, d: [f64; 2]) -> Result<[f64; 2]> {
        let e2 = self.gas.epsilon * self.gas.epsilon;
        let pb = self.u_bar.data[i];
        let p = [pb[0] + e2 * d[0], pb[1] + e2 * d[1]];
        let ex = truncated_excess(p[0] * p[0] + p[1] * p[1], &self.windows.data[i], &self.gas)? / e2;
        Ok([ex * p[0] + d[0], ex * p[1] + d[1]])
    }

    /// Unconstrained nodal gradient `ε⁻²∫(ρ̂p − p̄)·∇η_k`.
    pub fn raw_gradient(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let nq = self.u_bar.points_per_cell;
        let err = std::sync::Mutex::new(None);
        let g = self.disc.assemble_vector(|c, qps| {
            let local = self.disc.local(c, phi);
            let mut v = [0.0; 4];
            for (k, q) in qps.iter().enumerate() {
                match self.flux(c * nq + k, gradient_at(&local, q)) {
                    Ok(f) => {
                        for a in 0..4 {
                            v[a] += q.weight * (f[0] * q.grad[a][0] + f[1] * q.grad[a][1]);
                        }
                    }
                    Err(e) => *err.lock().unwrap() = Some(e),
                }
            }
            v
        });
        match err.into_inner().unwrap() {
            Some(e) => Err(e),
            None => Ok(g),
        }
    }

    /// Gradient with constrained entries set to zero.
    pub fn functional_gradient(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.raw_gradient(phi)?;
        for (gi, f) in g.iter_mut().zip(&self.fixed) {
            if *f {
                *gi = 0.0;
            }
        }
        Ok(g)
    }

    /// Hessian `∫ ∇η_aᵀ â(p) ∇η_b` with its extreme coefficient eigenvalues.
    pub fn hessian(&self, phi: &[f64]) -> Result<(CsrMatrix, f64, f64)> {
        let nq = self.u_bar.points_per_cell;
        let e2 = self.gas.epsilon * self.gas.epsilon;
        let err = std::sync::Mutex::new(None);
        let extremes = std::sync::Mutex::new((f64::INFINITY, f64::NEG_INFINITY));
        let m = self.disc.assemble_matrix(|c, qps| {
            let local = self.disc.local(c, phi);
            let mut k = [[0.0; 4]; 4];
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (qi, q) in qps.iter().enumerate() {
                let d = gradient_at(&local, q);
                let pb = self.u_bar.data[c * nq + qi];
                let p = [pb[0] + e2 * d[0], pb[1] + e2 * d[1]];
                let a = match crate::gas::hessian_2d(p, &self.windows.data[c * nq + qi], &self.gas) {
                    Ok((a, _)) => a,
                    Err(e) => {
                        *err.lock().unwrap() = Some(e);
                        return k;
                    }
                };
                let (l1, l2) = sym_eigenvalues(a);
                lo = lo.min(l1);
                hi = hi.max(l2);
                for i in 0..4 {
                    let ai = [
                        a[0][0] * q.grad[i][0] + a[0][1] * q.grad[i][1],
                        a[1][0] * q.grad[i][0] + a[1][1] * q.grad[i][1],
                    ];
                    for j in 0..4 {
                        k[i][j] += q.weight * (ai[0] * q.grad[j][0] + ai[1] * q.grad[j][1]);
                    }
                }
            }
            let mut ext = extremes.lock().unwrap();
            ext.0 = ext.0.min(lo);
            ext.1 = ext.1.max(hi);
            k
        });
        if let Some(e) = err.into_inner().unwrap() {
            return Err(e);
        }
        let (lo, hi) = extremes.into_inner().unwrap();
        Ok((m, lo, hi))
    }

    /// Discrete `‖∇φ‖_{L²}`, the norm of the reports.
    pub fn norm_v(&self, phi: &[f64]) -> f64 {
        self.disc
            .integrate(|c, qps| {
                let local = self.disc.local(c, phi);
                qps.iter()
                    .map(|q| {
                        let g = gradient_at(&local, q);
                        q.weight * (g[0] * g[0] + g[1] * g[1])
                    })
                    .sum()
            })
            .sqrt()
    }

    /// `‖(ρ̂(|p̄|²) − 1)/ε² p̄‖_{L²}`, the size of the linear part of the
    /// functional.
    pub fn source_norm(&self) -> f64 {
        let nq = self.u_bar.points_per_cell;
        self.disc
            .integrate(|c, qps| {
                qps.iter()
                    .enumerate()
                    .map(|(k, q)| {
                        let i = c * nq + k;
                        let p = self.u_bar.data[i];
                        let s = self.bar_excess.data[i];
                        q.weight * s * s * (p[0] * p[0] + p[1] * p[1])
                    })
                    .sum()
            })
            .sqrt()
    }

    /// `‖∇ψ̄‖² + ‖φ_f‖²` over the truncated domain.
    pub fn data_norm_sq(&self) -> f64 {
        let nq = self.u_bar.points_per_cell;
        let q_inf = self.gas.q_inf;
        self.disc.integrate(|c, qps| {
            qps.iter()
                .enumerate()
                .map(|(k, q)| {
                    let i = c * nq + k;
                    let u = self.u_bar.data[i];
                    let f = self.force.data[i].phi;
                    q.weight * ((u[0] - q_inf).powi(2) + u[1] * u[1] + f * f)
                })
                .sum()
        })
    }

    /// Constant `C` in `I(φ̃) ≥ (λ̂₁/2)‖φ̃‖² − C(‖∇ψ̄‖² + ‖φ_f‖²)`.
    pub fn coercivity_constant(&self) -> f64 {
        let data = self.data_norm_sq();
        if data == 0.0 {
            return 0.0;
        }
        self.source_norm().powi(2) / (self.bounds.lambda_min * data)
    }

    /// Newton iteration from `initial` (zero when `None`).
    pub fn minimize(
        &self,
        initial: Option<&[f64]>,
        tol: f64,
    ) -> Result<(PotentialField, MinimizeDiagnostics)> {
        self.minimize_with(initial, &NewtonSettings { tol, ..Default::default() })
    }

    pub fn minimize_with(
        &self,
        initial: Option<&[f64]>,
        settings: &NewtonSettings,
    ) -> Result<(PotentialField, MinimizeDiagnostics)> {
        let tol = settings.tol;
        let n = self.disc.n_nodes();
        let mut phi: Vec<f64> = match initial {
            Some(v) => v.to_vec(),
            None => vec![0.0; n],
        };
        for (v, f) in phi.iter_mut().zip(&self.fixed) {
            if *f {
                *v = 0.0;
            }
        }
        let mut diag = MinimizeDiagnostics::default();
        let mut energy = self.discrete_functional(&phi)?;
        let mut g = self.functional_gradient(&phi)?;
        let g0 = norm(&g);
        diag.gradient_norms.push(g0);
        diag.energies.push(energy);
        diag.initial_gradient_norm = g0;
        if g0 == 0.0 {
            diag.converged = true;
            return Ok((self.field(phi, 0.0), diag));
        }
        // The reference gradient is taken from the zero field so that runs
        // from different initial guesses share the same stopping level.
        let g_ref = if initial.is_some() {
            norm(&self.functional_gradient(&vec![0.0; n])?).max(g0)
        } else {
            g0
        };
        let floor = 1e-13 * self.gradient_scale;
        for _ in 0..settings.max_newton {
            let gn = norm(&g);
            if gn <= (tol * g_ref).max(floor) {
                diag.converged = true;
                break;
            }
            let (mut h, lo, hi) = self.hessian(&phi)?;
            diag.min_eigenvalue = diag.min_eigenvalue.min(lo);
            diag.max_eigenvalue = diag.max_eigenvalue.max(hi);
            if !(lo > 0.0) {
                return Err(Error::solver(
                    format!("Hessian lost positive definiteness (eigenvalue {lo})"),
                    diag.gradient_norms.clone(),
                ));
            }
            let mut rhs: Vec<f64> = g.iter().map(|v| -v).collect();
            h.constrain_zero(&self.fixed, &mut rhs);
            let mut step = vec![0.0; n];
            let stats = conjugate_gradient(&h, &rhs, &mut step, HESSIAN_CG_TOL, 20 * n + 100)
                .map_err(|e| match e {
                    Error::Solver { message, .. } => {
                        Error::solver(format!("Newton step: {message}"), diag.gradient_norms.clone())
                    }
                    other => other,
                })?;
            diag.cg_iterations.push(stats.iterations);
            let slope = dot(&g, &step);
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=settings.max_backtracks {
                let trial: Vec<f64> = phi.iter().zip(&step).map(|(p, s)| p + alpha * s).collect();
                let e = self.discrete_functional(&trial)?;
                let noise = 1e-13 * (energy.abs() + e.abs()) + f64::MIN_POSITIVE;
                if e <= energy + ARMIJO_C * alpha * slope || (-alpha * slope <= noise && e <= energy + noise) {
                    accepted = Some((trial, e));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((trial, e)) = accepted else {
                if gn <= 1e3 * floor {
                    // Stalled at rounding level.
                    diag.converged = true;
                    break;
                }
                return Err(Error::solver(
                    "line search failed to decrease the functional",
                    diag.gradient_norms.clone(),
                ));
            };
            phi = trial;
            energy = e;
            g = self.functional_gradient(&phi)?;
            diag.iterations += 1;
            diag.step_lengths.push(alpha);
            diag.gradient_norms.push(norm(&g));
            diag.energies.push(energy);
        }
        if !diag.converged {
            return Err(Error::solver(
                format!("Newton did not reach relative gradient {tol:e}"),
                diag.gradient_norms.clone(),
            ));
        }
        let residual = norm(&g) / g_ref;
        Ok((self.field(phi, residual), diag))
    }

    fn field(&self, values: Vec<f64>, residual: f64) -> PotentialField {
        PotentialField {
            kind: PotentialKind::CompressibleDifference,
            values,
            residual,
        }
    }

    /// Reconstructs the compressible flow from the difference potential.
    pub fn flow_state(&self, phi_tilde: &PotentialField) -> Result<FlowState> {
        let disc = self.disc;
        let e2 = self.gas.epsilon * self.gas.epsilon;
        let nq = self.u_bar.points_per_cell;
        let u = QuadField::from_fn(disc, |c, k, _| {
            let d = phi_tilde.gradient(disc, c, k);
            let pb = self.u_bar.at(c, k);
            [pb[0] + e2 * d[0], pb[1] + e2 * d[1]]
        });
        let mut margin = f64::INFINITY;
        let mut max_speed = 0.0_f64;
        for (i, v) in u.data.iter().enumerate() {
            let s = v[0].hypot(v[1]);
            margin = margin.min(self.windows.data[i].q_lower - s);
            max_speed = max_speed.max(s);
        }
        let truncated = !(margin > 0.0);
        let n = u.data.len();
        let mut rho = vec![0.0; n];
        let mut excess = vec![0.0; n];
        let mut mach_field = vec![0.0; n];
        let mut bernoulli = 0.0_f64;
        for i in 0..n {
            let v = u.data[i];
            let q2 = v[0] * v[0] + v[1] * v[1];
            let f = self.force.data[i];
            let ex = if truncated {
                truncated_excess(q2, &self.windows.data[i], &self.gas)?
            } else {
                density_from_speed(q2, &f, &self.gas).map_err(|e| Error::State(e.to_string()))? - 1.0
            };
            let r = 1.0 + ex;
            rho[i] = r;
            excess[i] = ex;
            mach_field[i] = mach(q2.sqrt(), r, &self.gas)?;
            if !truncated {
                let res = e2 * (0.5 * (q2 - self.gas.q_inf * self.gas.q_inf) - f.phi) + enthalpy(r, &self.gas)?;
                bernoulli = bernoulli.max(res.abs());
            }
        }
        if !truncated && bernoulli > 1e-10 {
            return Err(Error::State(format!("Bernoulli residual {bernoulli:e} exceeds 1e-10")));
        }
        if !truncated && mach_field.iter().any(|m| *m >= 1.0) {
            return Err(Error::State("supersonic point with positive cut-off margin".into()));
        }
        // ∇p = ρ∇(φ_f − |u|²/2) from the projected scalar.
        let s = disc.l2_project(|c, k| {
            let v = u.at(c, k);
            self.force.at(c, k).phi - 0.5 * (v[0] * v[0] + v[1] * v[1])
        })?;
        let grad_p = QuadField::from_fn(disc, |c, k, q| {
            let g = gradient_at(&disc.local(c, &s), q);
            let r = rho[c * nq + k];
            [r * g[0], r * g[1]]
        });
        Ok(FlowState {
            epsilon: self.gas.epsilon,
            phi_tilde: phi_tilde.clone(),
            psi_bar: self.psi_bar.clone(),
            u,
            rho: QuadField {
                points_per_cell: nq,
                data: rho,
            },
            density_excess: QuadField {
                points_per_cell: nq,
                data: excess,
            },
            mach: QuadField {
                points_per_cell: nq,
                data: mach_field,
            },
            grad_p,
            cutoff_margin: margin,
            max_speed,
            q_lower: self.spec.q_lower,
            truncated,
            bernoulli_residual: if truncated { f64::NAN } else { bernoulli },
        })
    }

    /// `∫ρu·∇η` with η equal to one on the first `layer + 1` node rings,
    /// divided by `∫|ρu·∇η|`. Zero flux through a closed surface around the
    /// obstacle shows up as a vanishing ratio.
    pub fn mass_flux_imbalance(&self, state: &FlowState, layer: usize) -> f64 {
        let disc = self.disc;
        let n_ang = disc.mesh.angular_nodes();
        let nq = state.u.points_per_cell;
        let eta: Vec<f64> = (0..disc.n_nodes())
            .map(|k| if k / n_ang <= layer { 1.0 } else { 0.0 })
            .collect();
        let mut net = 0.0;
        let mut abs = 0.0;
        let parts: Vec<(f64, f64)> = {
            use rayon::prelude::*;
            (0..disc.mesh.cells.len())
                .into_par_iter()
                .map(|c| {
                    let local = disc.local(c, &eta);
                    let mut s = (0.0, 0.0);
                    for (k, q) in disc.quad[c].iter().enumerate() {
                        let g = gradient_at(&local, q);
                        let i = c * nq + k;
                        let v = state.u.data[i];
                        let f = q.weight * state.rho.data[i] * (v[0] * g[0] + v[1] * g[1]);
                        s.0 += f;
                        s.1 += f.abs();
                    }
                    s
                })
                .collect()
        };
        for (a, b) in parts {
            net += a;
            abs += b;
        }
        if abs == 0.0 {
            0.0
        } else {
            net.abs() / abs
        }
    }

    /// Weak momentum-flux comparison of the pressure gradients on each test
    /// field: `−∫(ūū − ρuu):∇w + ∫(ρ−1)∇φ_f·w`.
    pub fn weak_pressure_gap(&self, state: &FlowState, panel: &TestPanel) -> Vec<f64> {
        let disc = self.disc;
        let nq = state.u.points_per_cell;
        panel
            .fields
            .iter()
            .map(|w| {
                disc.integrate(|c, qps| {
                    let mut s = 0.0;
                    for (k, q) in qps.iter().enumerate() {
                        let i = c * nq + k;
                        let Some((wv, gw)) = w.eval(q.x) else { continue };
                        let ub = self.u_bar.data[i];
                        let u = state.u.data[i];
                        let r = state.rho.data[i];
                        let f = self.force.data[i].grad_phi;
                        let mut t = 0.0;
                        for a in 0..2 {
                            for b in 0..2 {
                                t += (ub[a] * ub[b] - r * u[a] * u[b]) * gw[a][b];
                            }
                        }
                        s += q.weight * (-t + (r - 1.0) * (f[0] * wv[0] + f[1] * wv[1]));
                    }
                    s
                })
            })
            .collect()
    }
}

fn constrained_nodes(disc: &Discretization, far: FarFieldCondition) -> Vec<bool> {
    match far {
        FarFieldCondition::Dirichlet => disc.boundary_mask(BoundaryTag::FarField),
        FarFieldCondition::Neumann => {
            let mut m = vec![false; disc.n_nodes()];
            let mesh = &disc.mesh;
            m[mesh.node_index(mesh.n_r(), mesh.n_t() / 2)] = true;
            m
        }
    }
}

/// Eigenvalues of a symmetric 2×2 matrix in ascending order.
pub fn sym_eigenvalues(a: [[f64; 2]; 2]) -> (f64, f64) {
    let tr = 0.5 * (a[0][0] + a[1][1]);
    let diff = 0.5 * (a[0][0] - a[1][1]);
    let r = diff.hypot(a[0][1]);
    (tr - r, tr + r)
}

/// Convergence record of [`CompressibleProblem::minimize`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimizeDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub initial_gradient_norm: f64,
    pub gradient_norms: Vec<f64>,
    pub energies: Vec<f64>,
    pub step_lengths: Vec<f64>,
    pub cg_iterations: Vec<usize>,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

impl Default for MinimizeDiagnostics {
    fn default() -> Self {
        Self {
            iterations: 0,
            converged: false,
            initial_gradient_norm: 0.0,
            gradient_norms: Vec::new(),
            energies: Vec::new(),
            step_lengths: Vec::new(),
            cg_iterations: Vec::new(),
            min_eigenvalue: f64::INFINITY,
            max_eigenvalue: f64::NEG_INFINITY,
        }
    }
}

impl MinimizeDiagnostics {
    /// Observed convergence order `log(g_k/g_{k−1}) / log(g_{k−1}/g_{k−2})`
    /// over the last three gradient norms that lie above `floor`.
    pub fn tail_order(&self, floor: f64) -> Option<f64> {
        let g: Vec<f64> = self
            .gradient_norms
            .iter()
            .copied()
            .filter(|v| *v > floor)
            .collect();
        if g.len() < 3 {
            return None;
        }
        let n = g.len();
        Some((g[n - 1] / g[n - 2]).ln() / (g[n - 2] / g[n - 3]).ln())
    }
}

/// Derived compressible flow at quadrature points.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub epsilon: f64,
    pub phi_tilde: PotentialField,
    pub psi_bar: PotentialField,
    pub u: VelocityField,
    pub rho: QuadField<f64>,
    /// `ρ − 1`, computed without cancellation.
    pub density_excess: QuadField<f64>,
    pub mach: QuadField<f64>,
    pub grad_p: VelocityField,
    /// `min (q_lower(φ) − |u|)` over quadrature points.
    pub cutoff_margin: f64,
    pub max_speed: f64,
    /// Lower cut-off speed at φ = 0.
    pub q_lower: f64,
    /// True when the cut-off is active somewhere; ρ is then the truncated
    /// density.
    pub truncated: bool,
    pub bernoulli_residual: f64,
}

impl FlowState {
    pub fn max_mach(&self) -> f64 {
        self.mach.data.iter().fold(0.0, |m, v| m.max(*v))
    }

    pub fn max_density_deviation(&self) -> f64 {
        self.density_excess.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `(removed, margin)`: the cut-off is removed iff the largest quadrature
/// point speed stays below the lower threshold.
pub fn cutoff_active_check(state: &FlowState) -> (bool, f64) {
    (state.cutoff_margin > 0.0, state.cutoff_margin)
}

/// A smooth, compactly supported vector test field `b(x) e_k` with the bump
/// `b = (1 − |x−c|²/s²)³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BumpField {
    pub center: [f64; 2],
    pub radius: f64,
    pub component: usize,
}

impl BumpField {
    /// Value and gradient `∂w_a/∂x_b` at `x`, or `None` outside the support.
    pub fn eval(&self, x: [f64; 2]) -> Option<([f64; 2], [[f64; 2]; 2])> {
        let dx = [x[0] - self.center[0], x[1] - self.center[1]];
        let s2 = self.radius * self.radius;
        let t = 1.0 - (dx[0] * dx[0] + dx[1] * dx[1]) / s2;
        if t <= 0.0 {
            return None;
        }
        let b = t * t * t;
        let db = -6.0 * t * t / s2;
        let mut w = [0.0; 2];
        let mut g = [[0.0; 2]; 2];
        w[self.component] = b;
        g[self.component] = [db * dx[0], db * dx[1]];
        Some((w, g))
    }
}

/// Fixed panel of test fields for the weak pressure-gradient comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestPanel {
    pub fields: Vec<BumpField>,
}

impl TestPanel {
    /// `count` bumps with seeded centres inside the shell, each support kept
    /// away from the obstacle, the far boundary and the symmetry axis.
    pub fn seeded(disc: &Discretization, count: usize, seed: u64) -> Self {
        let mesh = &disc.mesh;
        let a = mesh.obstacle_radius();
        let r_far = mesh.params.r_far;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fields = Vec::with_capacity(count);
        while fields.len() < count {
            let radius = a * rng.gen_range(0.5..1.0);
            let r = rng.gen_range(a + 1.1 * radius..(4.0 * a).min(r_far - 1.1 * radius));
            let th = match mesh.mode() {
                MeshMode::Axisymmetric3d => rng.gen_range(0.0..std::f64::consts::PI),
                MeshMode::Planar2d => rng.gen_range(0.0..2.0 * std::f64::consts::PI),
            };
            let center = [r * th.cos(), r * th.sin()];
            if mesh.mode() == MeshMode::Axisymmetric3d && center[1] < 1.1 * radius {
                continue;
            }
            // Keep the support clear of an elongated obstacle as well.
            let (sa, sb) = mesh.params.shape.semi_axes();
            let clear = (0..64).all(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / 64.0;
                let p = [sa * t.cos(), sb * t.sin()];
                (p[0] - center[0]).hypot(p[1] - center[1]) > 1.05 * radius
            });
            if !clear {
                continue;
            }
            let component = fields.len() % 2;
            fields.push(BumpField {
                center,
                radius,
                component,
            });
        }
        Self { fields }
    }
}

/// Force field equal to `value` at every quadrature point.
pub fn uniform_force(disc: &Discretization, value: ForceValue) -> ForceField {
    QuadField::filled(disc, value)
}

/// Uniformly random nodal field in `[-amplitude, amplitude]`, zero on
/// constrained nodes.
pub fn random_field(problem: &CompressibleProblem, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    problem
        .fixed
        .iter()
        .map(|f| if *f { 0.0 } else { rng.gen_range(-amplitude..amplitude) })
        .collect()
}
