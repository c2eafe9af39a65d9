//! ε-sweeps: per-ε solves, norms, fitted rates, decay profiles and
//! sensitivity re-runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressible::{cutoff_active_check, CompressibleProblem, CutoffParams, FlowState, NewtonSettings, TestPanel};
use crate::error::{Error, Result};
use crate::fem::Discretization;
use crate::gas::GasModel;
use crate::geometry::{build_mesh, MeshMode, MeshParams};
use crate::incompressible::{solve_incompressible, FarFieldCondition, ForceField, PotentialField, PotentialKind};
use crate::lab::fit::{decay_fit, fit_rate, DecayFit, RateFit};
use crate::lab::force::{beta_prime, force_field, ForceEvaluator, ForceSpec};

pub const REPORT_SCHEMA: &str = "lowmach-report/1";
/// Default test-field panel size.
pub const DEFAULT_PANEL_SIZE: usize = 6;
/// Allowed growth of `∫|∇φ̃|²` over its value at the largest ε.
pub const ENERGY_GROWTH_FACTOR: f64 = 2.0;

/// Problem data shared by every ε of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSetup {
    pub mesh: MeshParams,
    pub gamma: f64,
    pub q_inf: f64,
    pub cutoff: CutoffParams,
    pub force: ForceSpec,
    pub far_field: FarFieldCondition,
    pub newton: NewtonSettings,
    pub panel_size: usize,
    pub seed: u64,
}

impl SweepSetup {
    pub fn with_mesh(mesh: MeshParams) -> Self {
        Self {
            mesh,
            gamma: 1.4,
            q_inf: 1.0,
            cutoff: CutoffParams::default(),
            force: ForceSpec::none(),
            far_field: FarFieldCondition::Dirichlet,
            newton: NewtonSettings::default(),
            panel_size: DEFAULT_PANEL_SIZE,
            seed: 0,
        }
    }

    /// Same inner resolution with the far boundary at twice the radius:
    /// extra geometric layers keep the first-layer width.
    pub fn far_doubled(&self) -> Self {
        let mut s = self.clone();
        let m = &self.mesh;
        let a = m.shape.max_radius();
        let r2 = 2.0 * m.r_far;
        s.mesh.r_far = r2;
        s.mesh.n_r = if m.grading == 1.0 {
            ((m.n_r as f64) * (r2 - a) / (m.r_far - a)).ceil() as usize
        } else {
            let g = m.grading;
            let h0 = (m.r_far - a) * (g - 1.0) / (g.powi(m.n_r as i32) - 1.0);
            ((1.0 + (r2 - a) * (g - 1.0) / h0).ln() / g.ln()).round().max(m.n_r as f64) as usize
        };
        s
    }

    /// One uniform refinement: twice the divisions, square-root grading.
    pub fn refined(&self) -> Self {
        let mut s = self.clone();
        s.mesh.n_r *= 2;
        s.mesh.n_t *= 2;
        s.mesh.grading = self.mesh.grading.sqrt();
        s
    }
}

/// Incompressible solution and force field for one setup.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub setup: SweepSetup,
    pub disc: Discretization,
    pub psi_bar: PotentialField,
    pub force: ForceEvaluator,
    pub force_field: ForceField,
    pub panel: TestPanel,
}

pub fn prepare(setup: &SweepSetup) -> Result<Prepared> {
    prepare_with(setup, None)
}

/// [`prepare`] reusing a previously computed ψ̄ when it fits the mesh.
pub fn prepare_with(setup: &SweepSetup, psi_bar: Option<PotentialField>) -> Result<Prepared> {
    let m = &setup.mesh;
    let mesh = build_mesh(m.shape, m.r_far, m.n_r, m.n_t, m.grading, m.mode)?;
    let disc = Discretization::new(mesh);
    let psi_bar = match psi_bar {
        Some(p) if p.values.len() == disc.n_nodes() && p.kind == PotentialKind::IncompressiblePerturbation => p,
        _ => solve_incompressible(&disc, setup.q_inf, setup.far_field)?,
    };
    let force = ForceEvaluator::new(&setup.force, m.shape, m.mode)?;
    let force_field = force_field(&force, &disc);
    let panel = TestPanel::seeded(&disc, setup.panel_size, setup.seed);
    Ok(Prepared {
        setup: setup.clone(),
        disc,
        psi_bar,
        force,
        force_field,
        panel,
    })
}

impl Prepared {
    pub fn problem(&self, epsilon: f64) -> Result<CompressibleProblem<'_>> {
        let gas = GasModel::new(self.setup.gamma, epsilon, self.setup.q_inf)?;
        CompressibleProblem::new(
            &self.disc,
            &self.psi_bar,
            self.force_field.clone(),
            gas,
            self.setup.cutoff,
            self.setup.far_field,
        )
    }

    /// Minimises for one ε and reconstructs the flow.
    pub fn solve(&self, epsilon: f64) -> Result<(CompressibleProblem<'_>, PotentialField, FlowState, usize)> {
        let pr = self.problem(epsilon)?;
        let (phi, diag) = pr.minimize_with(None, &self.setup.newton)?;
        let state = pr.flow_state(&phi)?;
        Ok((pr, phi, state, diag.iterations))
    }
}

/// Norms of one ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub newton_iterations: usize,
    pub cutoff_removed: bool,
    pub cutoff_margin: f64,
    pub max_speed: f64,
    pub u_diff_l2: f64,
    pub u_diff_inf: f64,
    /// `‖u − ū‖_∞ / ε²`.
    pub u_diff_inf_scaled: f64,
    pub rho_dev_inf: f64,
    pub max_mach: f64,
    /// `|⟨∇p^ε − ∇p̄, w⟩|` for each panel field.
    pub pressure_gaps: Vec<f64>,
    pub pressure_gap_max: f64,
    /// `∫|∇φ̃|²`.
    pub energy: f64,
    pub mass_flux_imbalance: f64,
    pub bernoulli_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsRow {
    pub epsilon: f64,
    pub converged: bool,
    pub error: Option<String>,
    pub metrics: Option<RowMetrics>,
}

/// Norms of `state` against the reference flow.
pub fn row_metrics(pr: &CompressibleProblem, state: &FlowState, panel: &TestPanel, iterations: usize) -> RowMetrics {
    let disc = pr.disc;
    let nq = state.u.points_per_cell;
    let parts: Vec<(f64, f64)> = (0..disc.mesh.cells.len())
        .into_par_iter()
        .map(|c| {
            let mut s = (0.0, 0.0_f64);
            for (k, q) in disc.quad[c].iter().enumerate() {
                let i = c * nq + k;
                let u = state.u.data[i];
                let ub = pr.u_bar.data[i];
                let d2 = (u[0] - ub[0]).powi(2) + (u[1] - ub[1]).powi(2);
                s.0 += q.weight * d2;
                s.1 = s.1.max(d2.sqrt());
            }
            s
        })
        .collect();
    let (mut l2, mut inf) = (0.0, 0.0_f64);
    for (a, b) in parts {
        l2 += a;
        inf = inf.max(b);
    }
    let e2 = state.epsilon * state.epsilon;
    let gaps: Vec<f64> = pr.weak_pressure_gap(state, panel).into_iter().map(f64::abs).collect();
    let (removed, margin) = cutoff_active_check(state);
    let layer = disc.mesh.n_r() / 2;
    RowMetrics {
        newton_iterations: iterations,
        cutoff_removed: removed,
        cutoff_margin: margin,
        max_speed: state.max_speed,
        u_diff_l2: l2.sqrt(),
        u_diff_inf: inf,
        u_diff_inf_scaled: inf / e2,
        rho_dev_inf: state.max_density_deviation(),
        max_mach: state.max_mach(),
        pressure_gap_max: gaps.iter().fold(0.0, |m, v| m.max(*v)),
        pressure_gaps: gaps,
        energy: pr.norm_v(&state.phi_tilde.values).powi(2),
        mass_flux_imbalance: pr.mass_flux_imbalance(state, layer),
        bernoulli_residual: if state.truncated { None } else { Some(state.bernoulli_residual) },
    }
}

/// Fitted log-log slopes of the headline norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slopes {
    pub rho_dev_inf: RateFit,
    pub u_diff_l2: RateFit,
    pub u_diff_inf: RateFit,
    pub max_mach: RateFit,
    pub pressure_gap: Vec<RateFit>,
    pub pressure_gap_min_slope: f64,
    pub pressure_gap_max_slope: f64,
}

impl Slopes {
    /// `(name, slope)` of every headline rate.
    pub fn headline(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("rho_dev_inf", self.rho_dev_inf.slope),
            ("u_diff_l2", self.u_diff_l2.slope),
            ("max_mach", self.max_mach.slope),
            ("pressure_gap_min", self.pressure_gap_min_slope),
            ("pressure_gap_max", self.pressure_gap_max_slope),
        ]
    }
}

/// Changes of the headline slopes under a perturbed setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeDeltas {
    pub label: String,
    pub n_r: usize,
    pub n_t: usize,
    pub r_far: f64,
    pub grading: f64,
    pub slopes: Option<Slopes>,
    /// `|Δslope|` per headline rate; `None` when the re-sweep failed.
    pub deltas: Option<Vec<(String, f64)>>,
    pub max_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub psi_bar: Vec<DecayFit>,
    pub phi_tilde: Vec<DecayFit>,
    pub min_psi_bar: Option<f64>,
    pub min_phi_tilde: Option<f64>,
    /// The ε at which φ̃ was profiled.
    pub phi_tilde_epsilon: f64,
    pub beta_prime: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub schema: String,
    /// Hash of the run configuration; empty outside the command line.
    pub config: String,
    pub mode: String,
    pub setup: SweepSetup,
    pub eps_grid: Vec<f64>,
    pub rows: Vec<EpsRow>,
    pub all_converged: bool,
    pub slopes: Option<Slopes>,
    pub decay: Option<DecayReport>,
    /// `‖u − ū‖_∞/ε²` relative variation over the two smallest ε.
    pub uniform_bound_variation: Option<f64>,
    pub max_scaled_difference: Option<f64>,
    /// Largest grid ε with the cut-off removed.
    pub eps_c_estimate: Option<f64>,
    pub energy_bounded: bool,
    pub sensitivity: Vec<SlopeDeltas>,
}

/// Options of [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SweepOptions {
    /// Re-run with doubled far-field radius and a refined mesh.
    pub sensitivity: bool,
}

fn check_grid(eps_grid: &[f64]) -> Result<()> {
    if eps_grid.is_empty() {
        return Err(Error::Config("sweep.eps is empty".into()));
    }
    if eps_grid.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(Error::Config("sweep.eps entries must be positive".into()));
    }
    if eps_grid.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Config("sweep.eps must be strictly decreasing".into()));
    }
    Ok(())
}

/// Solves every ε of the grid. Rows that fail carry their error message.
pub fn sweep_rows(prep: &Prepared, eps_grid: &[f64]) -> Vec<EpsRow> {
    eps_grid
        .par_iter()
        .map(|&eps| match prep.solve(eps) {
            Ok((pr, _, state, its)) => EpsRow {
                epsilon: eps,
                converged: true,
                error: None,
                metrics: Some(row_metrics(&pr, &state, &prep.panel, its)),
            },
            Err(e) => EpsRow {
                epsilon: eps,
                converged: false,
                error: Some(e.to_string()),
                metrics: None,
            },
        })
        .collect()
}

/// Slopes from the converged rows; requires at least four of them.
pub fn fit_slopes(rows: &[EpsRow]) -> Result<Slopes> {
    let ok: Vec<(&EpsRow, &RowMetrics)> = rows
        .iter()
        .filter_map(|r| r.metrics.as_ref().map(|m| (r, m)))
        .collect();
    if ok.len() < 4 {
        return Err(Error::Input(format!("need 4 converged rows for a slope, got {}", ok.len())));
    }
    let fit = |f: &dyn Fn(&RowMetrics) -> f64| -> Result<RateFit> {
        let pairs: Vec<(f64, f64)> = ok.iter().map(|(r, m)| (r.epsilon, f(m))).collect();
        fit_rate(&pairs)
    };
    let n_fields = ok[0].1.pressure_gaps.len();
    let mut gaps = Vec::with_capacity(n_fields);
    for w in 0..n_fields {
        gaps.push(fit(&|m| m.pressure_gaps[w])?);
    }
    let min = gaps.iter().map(|f| f.slope).fold(f64::INFINITY, f64::min);
    let max = gaps.iter().map(|f| f.slope).fold(f64::NEG_INFINITY, f64::max);
    Ok(Slopes {
        rho_dev_inf: fit(&|m| m.rho_dev_inf)?,
        u_diff_l2: fit(&|m| m.u_diff_l2)?,
        u_diff_inf: fit(&|m| m.u_diff_inf)?,
        max_mach: fit(&|m| m.max_mach)?,
        pressure_gap: gaps,
        pressure_gap_min_slope: min,
        pressure_gap_max_slope: max,
    })
}

/// Decay profiles of `|∇ψ̄|` and `|∇φ̃|` along three rays.
pub fn decay_profiles(prep: &Prepared, phi_tilde: &PotentialField, epsilon: f64) -> Result<DecayReport> {
    let a = prep.disc.mesh.obstacle_radius();
    let window = (2.0 * a, 0.8 * prep.disc.mesh.params.r_far);
    let angles: Vec<f64> = match prep.disc.mesh.mode() {
        MeshMode::Axisymmetric3d => vec![std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_2, 3.0 * std::f64::consts::FRAC_PI_4],
        MeshMode::Planar2d => vec![std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_2, 3.0 * std::f64::consts::FRAC_PI_4, 1.5 * std::f64::consts::PI],
    };
    let fits = |f: &PotentialField| -> Result<Vec<DecayFit>> {
        angles.iter().map(|th| decay_fit(&prep.disc, f, *th, window)).collect()
    };
    let psi = fits(&prep.psi_bar)?;
    let phi = fits(phi_tilde)?;
    let min = |v: &[DecayFit]| v.iter().filter_map(|f| f.exponent).reduce(f64::min);
    let n = prep.disc.mesh.mode().dimension();
    let bp = if prep.setup.force.is_zero() {
        n as f64 / 2.0
    } else {
        beta_prime(n, prep.setup.force.beta, prep.setup.force.q)
    };
    Ok(DecayReport {
        min_psi_bar: min(&psi),
        min_phi_tilde: min(&phi),
        psi_bar: psi,
        phi_tilde: phi,
        phi_tilde_epsilon: epsilon,
        beta_prime: bp,
    })
}

/// Runs the ε-sweep and assembles the report.
pub fn sweep(setup: &SweepSetup, eps_grid: &[f64], options: SweepOptions) -> Result<ConvergenceReport> {
    check_grid(eps_grid)?;
    let prep = prepare(setup)?;
    let rows = sweep_rows(&prep, eps_grid);
    let all_converged = rows.iter().all(|r| r.converged);
    let slopes = fit_slopes(&rows).ok();
    let ok: Vec<&EpsRow> = rows.iter().filter(|r| r.metrics.is_some()).collect();
    let scaled: Vec<f64> = ok.iter().map(|r| r.metrics.as_ref().unwrap().u_diff_inf_scaled).collect();
    let uniform_bound_variation = if scaled.len() >= 2 {
        let (a, b) = (scaled[scaled.len() - 2], scaled[scaled.len() - 1]);
        Some((a - b).abs() / a.max(b))
    } else {
        None
    };
    let max_scaled_difference = scaled.iter().copied().reduce(f64::max);
    let eps_c_estimate = ok
        .iter()
        .filter(|r| r.metrics.as_ref().unwrap().cutoff_removed)
        .map(|r| r.epsilon)
        .reduce(f64::max);
    let energy_bounded = match ok.first() {
        Some(first) => {
            let e0 = first.metrics.as_ref().unwrap().energy;
            ok.iter().all(|r| r.metrics.as_ref().unwrap().energy <= ENERGY_GROWTH_FACTOR * e0)
        }
        None => false,
    };
    let decay = match ok.last() {
        Some(r) => {
            let (_, phi, _, _) = prep.solve(r.epsilon)?;
            Some(decay_profiles(&prep, &phi, r.epsilon)?)
        }
        None => None,
    };
    let mut sensitivity = Vec::new();
    if options.sensitivity {
        for (label, alt) in [("r_far_doubled", setup.far_doubled()), ("refined", setup.refined())] {
            sensitivity.push(sensitivity_run(label, &alt, eps_grid, slopes.as_ref()));
        }
    }
    Ok(ConvergenceReport {
        schema: REPORT_SCHEMA.to_string(),
        config: String::new(),
        mode: setup.mesh.mode.label().to_string(),
        setup: setup.clone(),
        eps_grid: eps_grid.to_vec(),
        rows,
        all_converged,
        slopes,
        decay,
        uniform_bound_variation,
        max_scaled_difference,
        eps_c_estimate,
        energy_bounded,
        sensitivity,
    })
}

fn sensitivity_run(label: &str, alt: &SweepSetup, eps_grid: &[f64], base: Option<&Slopes>) -> SlopeDeltas {
    let slopes = prepare(alt).ok().and_then(|p| fit_slopes(&sweep_rows(&p, eps_grid)).ok());
    let deltas = match (&slopes, base) {
        (Some(s), Some(b)) => Some(
            s.headline()
                .iter()
                .zip(b.headline())
                .map(|((name, x), (_, y))| (name.to_string(), (x - y).abs()))
                .collect::<Vec<_>>(),
        ),
        _ => None,
    };
    let max_delta = deltas
        .as_ref()
        .map(|d| d.iter().map(|(_, v)| *v).fold(0.0, f64::max));
    SlopeDeltas {
        label: label.to_string(),
        n_r: alt.mesh.n_r,
        n_t: alt.mesh.n_t,
        r_far: alt.mesh.r_far,
        grading: alt.mesh.grading,
        slopes,
        deltas,
        max_delta,
    }
}

/// Declared tolerances of the headline rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateTolerances {
    pub rho: f64,
    pub u_l2: f64,
    pub mach: f64,
    pub pressure_gap: f64,
}

impl Default for RateTolerances {
    fn default() -> Self {
        Self {
            rho: 0.1,
            u_l2: 0.15,
            mach: 0.05,
            pressure_gap: 0.2,
        }
    }
}

impl ConvergenceReport {
    /// Failed rate checks, empty when every headline slope is within its
    /// tolerance of the predicted value.
    pub fn rate_failures(&self, tol: &RateTolerances) -> Vec<String> {
        let Some(s) = &self.slopes else {
            return vec!["no slopes (fewer than 4 converged rows)".into()];
        };
        let mut out = Vec::new();
        let mut check = |name: &str, got: f64, want: f64, t: f64| {
            if !((got - want).abs() <= t) {
                out.push(format!("{name}: slope {got} not within {t} of {want}"));
            }
        };
        check("rho_dev_inf", s.rho_dev_inf.slope, 2.0, tol.rho);
        check("u_diff_l2", s.u_diff_l2.slope, 2.0, tol.u_l2);
        check("max_mach", s.max_mach.slope, 1.0, tol.mach);
        for (i, f) in s.pressure_gap.iter().enumerate() {
            check(&format!("pressure_gap[{i}]"), f.slope, 2.0, tol.pressure_gap);
        }
        out
    }

    /// One CSV row per ε.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# {} config={} mode={}\n", REPORT_SCHEMA, self.config, self.mode);
        s.push_str(
            "epsilon,converged,cutoff_removed,cutoff_margin,max_speed,u_diff_l2,u_diff_inf,\
             u_diff_inf_scaled,rho_dev_inf,max_mach,pressure_gap_max,energy,newton_iterations,\
             mass_flux_imbalance,error\n",
        );
        for r in &self.rows {
            match &r.metrics {
                Some(m) => s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},\n",
                    r.epsilon,
                    r.converged,
                    m.cutoff_removed,
                    m.cutoff_margin,
                    m.max_speed,
                    m.u_diff_l2,
                    m.u_diff_inf,
                    m.u_diff_inf_scaled,
                    m.rho_dev_inf,
                    m.max_mach,
                    m.pressure_gap_max,
                    m.energy,
                    m.newton_iterations,
                    m.mass_flux_imbalance
                )),
                None => s.push_str(&format!(
                    "{},false,,,,,,,,,,,,,\"{}\"\n",
                    r.epsilon,
                    r.error.as_deref().unwrap_or("").replace('"', "'")
                )),
            }
        }
        if let Some(sl) = &self.slopes {
            for (name, v) in sl.headline() {
                s.push_str(&format!("# slope {name} {v}\n"));
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Parse(format!("unsupported report schema {}", r.schema)));
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ObstacleShape;

    fn small() -> SweepSetup {
        SweepSetup::with_mesh(MeshParams {
            shape: ObstacleShape::Sphere { radius: 1.0 },
            r_far: 10.0,
            n_r: 12,
            n_t: 12,
            grading: 1.15,
            mode: MeshMode::Axisymmetric3d,
        })
    }

    #[test]
    fn far_doubled_keeps_first_layer_width() {
        let s = small();
        let d = s.far_doubled();
        let width = |m: &MeshParams| {
            let g = m.grading;
            (m.r_far - 1.0) * (g - 1.0) / (g.powi(m.n_r as i32) - 1.0)
        };
        let (w0, w1) = (width(&s.mesh), width(&d.mesh));
        assert!((w1 / w0 - 1.0).abs() < 0.2, "{w0} vs {w1}");
        assert_eq!(d.mesh.r_far, 20.0);
        assert_eq!(s.refined().mesh.n_t, 24);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(sweep(&small(), &[], SweepOptions::default()).is_err());
        assert!(sweep(&small(), &[0.1, 0.2], SweepOptions::default()).is_err());
        assert!(sweep(&small(), &[0.1, -0.05], SweepOptions::default()).is_err());
    }

    #[test]
    fn small_sweep_report_round_trips() {
        let report = sweep(&small(), &[0.4, 0.2, 0.1, 0.05], SweepOptions::default()).unwrap();
        assert!(report.all_converged);
        let s = report.slopes.as_ref().unwrap();
        assert!((s.rho_dev_inf.slope - 2.0).abs() < 0.2);
        assert!((s.max_mach.slope - 1.0).abs() < 0.1);
        assert_eq!(report.eps_c_estimate, Some(0.4));
        let json = report.to_json().unwrap();
        assert_eq!(ConvergenceReport::from_json(&json).unwrap(), report);
        let csv = report.to_csv();
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 5);
        assert!(!report
            .rate_failures(&RateTolerances {
                rho: 1e-4,
                u_l2: 1e-4,
                mach: 1e-4,
                pressure_gap: 1e-4
            })
            .is_empty());
    }
}
