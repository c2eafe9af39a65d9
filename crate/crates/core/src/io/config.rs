//! Run configuration: strict JSON schema, range validation and the
//! content hash that names the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compressible::{CutoffParams, NewtonSettings};
use crate::error::{Error, Result};
use crate::geometry::{MeshMode, MeshParams, ObstacleShape};
use crate::incompressible::FarFieldCondition;
use crate::lab::force::ForceSpec;
use crate::lab::sweep::{RateTolerances, SweepSetup, DEFAULT_PANEL_SIZE};

pub const DEFAULT_SEED: u64 = 20240601;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub shape: ObstacleShape,
    #[serde(default = "default_r_far")]
    pub r_far: f64,
    #[serde(default = "default_divisions")]
    pub n_r: usize,
    #[serde(default = "default_divisions")]
    pub n_t: usize,
    #[serde(default = "default_grading")]
    pub grading: f64,
    #[serde(default = "default_mode")]
    pub mode: MeshMode,
}

fn default_r_far() -> f64 {
    20.0
}
fn default_divisions() -> usize {
    64
}
fn default_grading() -> f64 {
    1.15
}
fn default_mode() -> MeshMode {
    MeshMode::Axisymmetric3d
}

impl GeometryConfig {
    pub fn mesh_params(&self) -> MeshParams {
        MeshParams {
            shape: self.shape,
            r_far: self.r_far,
            n_r: self.n_r,
            n_t: self.n_t,
            grading: self.grading,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GasConfig {
    pub gamma: f64,
    pub q_inf: f64,
}

impl Default for GasConfig {
    fn default() -> Self {
        Self { gamma: 1.4, q_inf: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_newton: usize,
    pub max_backtracks: usize,
    pub far_field: FarFieldCondition,
    pub panel_size: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let n = NewtonSettings::default();
        Self {
            tol: n.tol,
            max_newton: n.max_newton,
            max_backtracks: n.max_backtracks,
            far_field: FarFieldCondition::Dirichlet,
            panel_size: DEFAULT_PANEL_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub eps: Vec<f64>,
    /// Re-run with doubled far-field radius and one refinement.
    pub sensitivity: bool,
    pub rate_tolerances: RateTolerances,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            eps: vec![0.4, 0.2, 0.1, 0.05],
            sensitivity: true,
            rate_tolerances: RateTolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            formats: vec![OutputFormat::Csv, OutputFormat::Json],
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub gas: GasConfig,
    #[serde(default)]
    pub cutoff: CutoffParams,
    #[serde(default = "ForceSpec::none")]
    pub force: ForceSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    /// Sphere of unit radius with every other entry at its default.
    pub fn sphere() -> Self {
        Self {
            geometry: GeometryConfig {
                shape: ObstacleShape::Sphere { radius: 1.0 },
                r_far: default_r_far(),
                n_r: default_divisions(),
                n_t: default_divisions(),
                grading: default_grading(),
                mode: default_mode(),
            },
            gas: GasConfig::default(),
            cutoff: CutoffParams::default(),
            force: ForceSpec::none(),
            solver: SolverConfig::default(),
            sweep: SweepConfig::default(),
            output: OutputConfig::default(),
            seed: DEFAULT_SEED,
        }
    }

    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serialises")
    }

    /// Checks every numeric range before any solve; the message names the
    /// offending key.
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        match g.shape {
            ObstacleShape::Sphere { radius } | ObstacleShape::Disk { radius } => {
                positive("geometry.shape.radius", radius)?
            }
            ObstacleShape::Ellipse { semi_x, semi_y } => {
                positive("geometry.shape.semi_x", semi_x)?;
                positive("geometry.shape.semi_y", semi_y)?;
            }
        }
        if matches!(g.shape, ObstacleShape::Disk { .. }) && g.mode == MeshMode::Axisymmetric3d {
            return Err(Error::Config(
                "geometry.shape: a disk is planar; use a sphere or ellipse in axisymmetric-3d mode".into(),
            ));
        }
        let a = g.shape.max_radius();
        if !(g.r_far >= 5.0 * a) || !g.r_far.is_finite() {
            return Err(Error::Config(format!(
                "geometry.r_far must be at least 5 obstacle radii ({}), got {}",
                5.0 * a,
                g.r_far
            )));
        }
        if g.n_r < 4 {
            return Err(Error::Config(format!("geometry.n_r must be at least 4, got {}", g.n_r)));
        }
        if g.n_t < 4 {
            return Err(Error::Config(format!("geometry.n_t must be at least 4, got {}", g.n_t)));
        }
        if !(g.grading >= 1.0) || !g.grading.is_finite() {
            return Err(Error::Config(format!("geometry.grading must be >= 1, got {}", g.grading)));
        }
        if !(self.gas.gamma > 1.0) || !self.gas.gamma.is_finite() {
            return Err(Error::Config(format!("gas.gamma must exceed 1, got {}", self.gas.gamma)));
        }
        if !(self.gas.q_inf >= 0.0) || !self.gas.q_inf.is_finite() {
            return Err(Error::Config(format!("gas.q_inf must be non-negative, got {}", self.gas.q_inf)));
        }
        let c = &self.cutoff;
        if !(c.theta > 0.0 && c.theta < 1.0) {
            return Err(Error::Config(format!("cutoff.theta must lie in (0, 1), got {}", c.theta)));
        }
        positive("cutoff.eps0", c.eps0)?;
        self.force.validate()?;
        let s = &self.solver;
        positive("solver.tol", s.tol)?;
        if s.max_newton == 0 {
            return Err(Error::Config("solver.max_newton must be positive".into()));
        }
        if s.panel_size == 0 {
            return Err(Error::Config("solver.panel_size must be positive".into()));
        }
        let eps = &self.sweep.eps;
        if eps.is_empty() {
            return Err(Error::Config("sweep.eps must not be empty".into()));
        }
        for (i, e) in eps.iter().enumerate() {
            positive(&format!("sweep.eps[{i}]"), *e)?;
        }
        if eps.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config("sweep.eps must be strictly decreasing".into()));
        }
        let t = &self.sweep.rate_tolerances;
        for (name, v) in [
            ("rho", t.rho),
            ("u_l2", t.u_l2),
            ("mach", t.mach),
            ("pressure_gap", t.pressure_gap),
        ] {
            positive(&format!("sweep.rate_tolerances.{name}"), v)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialisation, without the output section.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        let canonical = serde_json::to_string(&c).expect("configuration serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// `<output.directory>/<hash>`.
    pub fn run_directory(&self) -> PathBuf {
        self.output.directory.join(self.hash())
    }

    pub fn sweep_setup(&self) -> SweepSetup {
        SweepSetup {
            mesh: self.geometry.mesh_params(),
            gamma: self.gas.gamma,
            q_inf: self.gas.q_inf,
            cutoff: self.cutoff,
            force: self.force.clone(),
            far_field: self.solver.far_field,
            newton: NewtonSettings {
                tol: self.solver.tol,
                max_newton: self.solver.max_newton,
                max_backtracks: self.solver.max_backtracks,
            },
            panel_size: self.solver.panel_size,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"geometry": {"shape": {"kind": "sphere", "radius": 1.0}}}"#;

    #[test]
    fn minimal_document_takes_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c, RunConfig::sphere());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_json(r#"{"geometry": {"shape": {"kind": "sphere", "radius": 1.0}}, "colour": 1}"#)
            .unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
        let e = RunConfig::from_json(r#"{"geometry": {"shape": {"kind": "sphere", "radius": 1.0, "r": 2}}}"#)
            .unwrap_err();
        assert!(e.to_string().contains('r'), "{e}");
        assert!(RunConfig::from_json(r#"{"geometry": {"shape": {"kind": "sphere", "radius": 1.0}}, "solver": {"tolerance": 1}}"#).is_err());
    }

    #[test]
    fn messages_name_the_field() {
        let cases = [
            (r#"{"geometry": {"shape": {"kind": "sphere", "radius": -1.0}}}"#, "geometry.shape.radius"),
            (r#"{"geometry": {"shape": {"kind": "sphere", "radius": 1.0}, "r_far": 3}}"#, "geometry.r_far"),
            (r#"{"geometry": {"shape": {"kind": "sphere", "radius": 1.0}, "n_t": 2}}"#, "geometry.n_t"),
            (r#"{"geometry": {"shape": {"kind": "sphere", "radius": 1.0}}, "gas": {"gamma": 1.0, "q_inf": 1}}"#, "gas.gamma"),
            (r#"{"geometry": {"shape": {"kind": "sphere", "radius": 1.0}}, "sweep": {"eps": []}}"#, "sweep.eps"),
            (r#"{"geometry": {"shape": {"kind": "sphere", "radius": 1.0}}, "sweep": {"eps": [0.1, 0.2]}}"#, "sweep.eps"),
            (r#"{"geometry": {"shape": {"kind": "sphere", "radius": 1.0}}, "cutoff": {"theta": 1.5, "eps0": 0.45}}"#, "cutoff.theta"),
            (r#"{"geometry": {"shape": {"kind": "disk", "radius": 1.0}}}"#, "geometry.shape"),
        ];
        for (doc, field) in cases {
            let e = RunConfig::from_json(doc).unwrap_err();
            assert!(matches!(e, Error::Config(_)));
            assert!(e.to_string().contains(field), "{field}: {e}");
        }
    }

    #[test]
    fn hash_tracks_content_not_output_location() {
        let a = RunConfig::sphere();
        let mut b = a.clone();
        b.output.directory = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
