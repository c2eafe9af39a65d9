//! Subcommand bodies. Each writes its artifacts into the run directory and
//! returns the process exit status.

use std::path::PathBuf;

use serde::Serialize;
use serde_json::json;

use crate::compressible::cutoff_active_check;
use crate::error::{Error, Result};
use crate::fem::Discretization;
use crate::geometry::build_mesh;
use crate::incompressible::{
    energy, max_surface_speed, net_obstacle_flux, recovered_velocity, solve_incompressible, stagnation_speeds,
    LINEAR_TOL,
};
use crate::io::config::{OutputFormat, RunConfig};
use crate::io::dump::{
    field_from_text, field_to_text, mesh_to_text, obstacle_nodes, surface_csv, write_artifact, SurfaceProfile,
};
use crate::lab::force::{validate_force, ForceEvaluator};
use crate::lab::sweep::{prepare_with, row_metrics, sweep, SweepOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_CUTOFF: i32 = 4;
pub const EXIT_RATES: i32 = 5;

pub const PSI_BAR_FILE: &str = "psi_bar.field";

/// Exit status for an error that aborted a command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Construction(_) | Error::Domain(_) | Error::Parse(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Solver { .. } | Error::State(_) | Error::Input(_) | Error::Io(_) => EXIT_SOLVER,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub directory: PathBuf,
    pub files: Vec<String>,
    pub message: String,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    hash: String,
    dir: PathBuf,
    files: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self> {
        let run = Self {
            cfg,
            hash: cfg.hash(),
            dir: cfg.run_directory(),
            files: Vec::new(),
        };
        write_artifact(&run.dir, "config.json", &(cfg.to_json() + "\n"))?;
        Ok(run)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        write_artifact(&self.dir, name, contents)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string(value)? + "\n";
        self.write(name, &text)
    }

    fn disc(&self) -> Result<Discretization> {
        let m = self.cfg.geometry.mesh_params();
        Ok(Discretization::new(build_mesh(m.shape, m.r_far, m.n_r, m.n_t, m.grading, m.mode)?))
    }

    fn finish(self, code: i32, message: impl Into<String>) -> Outcome {
        Outcome {
            code,
            directory: self.dir,
            files: self.files,
            message: message.into(),
        }
    }
}

pub fn dump_mesh(cfg: &RunConfig) -> Result<Outcome> {
    let mut run = Run::new(cfg)?;
    let disc = run.disc()?;
    let text = mesh_to_text(&disc.mesh, &run.hash);
    run.write("mesh.txt", &text)?;
    let n = disc.mesh.nodes.len();
    Ok(run.finish(EXIT_OK, format!("mesh with {n} nodes")))
}

pub fn solve_incompressible_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let mut run = Run::new(cfg)?;
    let disc = run.disc()?;
    let q_inf = cfg.gas.q_inf;
    let psi = solve_incompressible(&disc, q_inf, cfg.solver.far_field)?;
    run.write(PSI_BAR_FILE, &field_to_text(&disc, &psi, &run.hash))?;
    let u = recovered_velocity(&disc, &psi, q_inf)?;
    let profile = SurfaceProfile {
        columns: vec!["u1", "u2", "speed"],
        rows: obstacle_nodes(&disc.mesh)
            .into_iter()
            .map(|n| (n, vec![u[n][0], u[n][1], u[n][0].hypot(u[n][1])]))
            .collect(),
    };
    if cfg.output.wants(OutputFormat::Csv) {
        run.write("surface_incompressible.csv", &surface_csv(&disc, &profile, &run.hash))?;
    }
    let summary = json!({
        "schema": "lowmach-incompressible-summary/1",
        "config": run.hash,
        "mode": disc.mesh.mode().label(),
        "residual": psi.residual,
        "energy": energy(&disc, &psi),
        "max_surface_speed": max_surface_speed(&disc, &psi, q_inf),
        "stagnation_speeds": stagnation_speeds(&disc, &psi, q_inf)?,
        "net_obstacle_flux": net_obstacle_flux(&disc, &psi, q_inf),
    });
    run.write_json("summary_incompressible.json", &summary)?;
    if psi.residual < LINEAR_TOL {
        Ok(run.finish(EXIT_OK, format!("residual {:e}", psi.residual)))
    } else {
        Ok(run.finish(EXIT_SOLVER, format!("residual {:e} above {LINEAR_TOL:e}", psi.residual)))
    }
}

pub fn solve_compressible_cmd(cfg: &RunConfig, epsilon: f64) -> Result<Outcome> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!("--epsilon must be positive, got {epsilon}")));
    }
    let mut run = Run::new(cfg)?;
    let stored = std::fs::read_to_string(run.dir.join(PSI_BAR_FILE))
        .ok()
        .and_then(|t| field_from_text(&t).ok());
    let setup = cfg.sweep_setup();
    let n_expected = {
        let m = &setup.mesh;
        let ang = match m.mode {
            crate::geometry::MeshMode::Axisymmetric3d => m.n_t + 1,
            crate::geometry::MeshMode::Planar2d => m.n_t,
        };
        (m.n_r + 1) * ang
    };
    let reused = stored.as_ref().is_some_and(|p| p.values.len() == n_expected);
    let prep = prepare_with(&setup, if reused { stored } else { None })?;
    if !reused {
        run.write(PSI_BAR_FILE, &field_to_text(&prep.disc, &prep.psi_bar, &run.hash))?;
    }
    let (pr, phi, state, iterations) = prep.solve(epsilon)?;
    let tag = format!("eps_{epsilon}");
    run.write(&format!("phi_tilde_{tag}.field"), &field_to_text(&prep.disc, &phi, &run.hash))?;
    let (removed, margin) = cutoff_active_check(&state);
    let m = row_metrics(&pr, &state, &prep.panel, iterations);
    if cfg.output.wants(OutputFormat::Csv) {
        let rho = prep.disc.l2_project(|c, k| state.rho.at(c, k))?;
        let mach = prep.disc.l2_project(|c, k| state.mach.at(c, k))?;
        let profile = SurfaceProfile {
            columns: vec!["rho", "mach"],
            rows: obstacle_nodes(&prep.disc.mesh)
                .into_iter()
                .map(|n| (n, vec![rho[n], mach[n]]))
                .collect(),
        };
        run.write(&format!("surface_{tag}.csv"), &surface_csv(&prep.disc, &profile, &run.hash))?;
    }
    let summary = json!({
        "schema": "lowmach-compressible-summary/1",
        "config": run.hash,
        "mode": prep.disc.mesh.mode().label(),
        "epsilon": epsilon,
        "incompressible": if reused { "loaded" } else { "computed implicitly" },
        "cutoff_removed": removed,
        "cutoff_margin": margin,
        "energy": m.energy,
        "newton_iterations": iterations,
        "newton_residual": phi.residual,
        "max_speed": m.max_speed,
        "max_mach": m.max_mach,
        "rho_dev_inf": m.rho_dev_inf,
        "u_diff_l2": m.u_diff_l2,
        "u_diff_inf": m.u_diff_inf,
        "pressure_gaps": m.pressure_gaps,
        "mass_flux_imbalance": m.mass_flux_imbalance,
        "bernoulli_residual": m.bernoulli_residual,
    });
    run.write_json(&format!("summary_{tag}.json"), &summary)?;
    if removed {
        Ok(run.finish(EXIT_OK, format!("cut-off removed, margin {margin}")))
    } else {
        Ok(run.finish(EXIT_CUTOFF, format!("cut-off active, margin {margin}")))
    }
}

pub fn sweep_cmd(cfg: &RunConfig, assert_rates: bool) -> Result<Outcome> {
    let mut run = Run::new(cfg)?;
    let options = SweepOptions {
        sensitivity: cfg.sweep.sensitivity,
    };
    let mut report = sweep(&cfg.sweep_setup(), &cfg.sweep.eps, options)?;
    report.config = run.hash.clone();
    if cfg.output.wants(OutputFormat::Csv) {
        run.write("report.csv", &report.to_csv())?;
    }
    if cfg.output.wants(OutputFormat::Json) {
        run.write("report.json", &(report.to_json()? + "\n"))?;
    }
    if !report.all_converged {
        let bad: Vec<String> = report
            .rows
            .iter()
            .filter(|r| !r.converged)
            .map(|r| r.epsilon.to_string())
            .collect();
        return Ok(run.finish(EXIT_SOLVER, format!("unconverged at eps {}", bad.join(", "))));
    }
    if assert_rates {
        let failures = report.rate_failures(&cfg.sweep.rate_tolerances);
        if !failures.is_empty() {
            return Ok(run.finish(EXIT_RATES, failures.join("; ")));
        }
    }
    let msg = match &report.slopes {
        Some(s) => s
            .headline()
            .iter()
            .map(|(k, v)| format!("{k} {v:.3}"))
            .collect::<Vec<_>>()
            .join(", "),
        None => "fewer than 4 rows; no slopes".into(),
    };
    Ok(run.finish(EXIT_OK, msg))
}

pub fn validate_force_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let mut run = Run::new(cfg)?;
    let disc = run.disc()?;
    let ev = ForceEvaluator::new(&cfg.force, cfg.geometry.shape, cfg.geometry.mode)?;
    let verdict = validate_force(&ev, cfg.force.beta, cfg.force.q, &disc)?;
    let doc = json!({
        "schema": "lowmach-force-verdict/1",
        "config": run.hash,
        "verdict": verdict,
    });
    run.write_json("force_verdict.json", &doc)?;
    let word = if verdict.admissible { "admissible" } else { "inadmissible" };
    Ok(run.finish(EXIT_OK, word))
}
