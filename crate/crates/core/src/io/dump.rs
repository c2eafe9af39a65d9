//! Versioned plain-text dumps of meshes and nodal fields, and surface CSVs.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! loader reproduces the dumped object bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fem::Discretization;
use crate::geometry::{BoundaryTag, CellSide, ExteriorMesh, Facet, MeshMode, MeshParams};
use crate::incompressible::{PotentialField, PotentialKind};

pub const MESH_SCHEMA: &str = "lowmach-mesh/1";
pub const FIELD_SCHEMA: &str = "lowmach-field/1";
pub const SURFACE_SCHEMA: &str = "lowmach-surface/1";

/// Parsed `# schema key=value ...` header line.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub schema: String,
    pub entries: Vec<(String, String)>,
}

impl Header {
    pub fn new(schema: &str) -> Self {
        Self {
            schema: schema.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Parse(format!("header lacks `{key}`")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Parse(format!("bad header value {key}={v}")))
    }

    pub fn line(&self) -> String {
        let mut s = format!("# {}", self.schema);
        for (k, v) in &self.entries {
            write!(s, " {k}={v}").unwrap();
        }
        s
    }

    pub fn parse(line: &str, schema: &str) -> Result<Self> {
        let mut words = line
            .strip_prefix("# ")
            .ok_or_else(|| Error::Parse("missing header line".into()))?
            .split(' ');
        let found = words.next().unwrap_or("");
        if found != schema {
            return Err(Error::Parse(format!("expected schema {schema}, found {found}")));
        }
        let mut entries = Vec::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header entry `{w}`")))?;
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Self {
            schema: schema.to_string(),
            entries,
        })
    }
}

fn num<T: std::str::FromStr>(s: Option<&str>, what: &str) -> Result<T> {
    let s = s.ok_or_else(|| Error::Parse(format!("missing {what}")))?;
    s.parse().map_err(|_| Error::Parse(format!("bad {what}: `{s}`")))
}

/// Reads a `name count` section opener.
fn section<'a>(lines: &mut impl Iterator<Item = &'a str>, name: &str) -> Result<usize> {
    let line = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("missing section {name}")))?;
    let mut w = line.split(' ');
    if w.next() != Some(name) {
        return Err(Error::Parse(format!("expected section {name}, found `{line}`")));
    }
    num(w.next(), &format!("{name} count"))
}

fn next_line<'a>(lines: &mut impl Iterator<Item = &'a str>, what: &str) -> Result<&'a str> {
    lines
        .next()
        .ok_or_else(|| Error::Parse(format!("truncated {what} table")))
}

pub fn mesh_to_text(mesh: &ExteriorMesh, config_hash: &str) -> String {
    let p = &mesh.params;
    let header = Header::new(MESH_SCHEMA)
        .with("config", config_hash)
        .with("mode", p.mode.name())
        .with("nodes", mesh.nodes.len())
        .with("cells", mesh.cells.len())
        .with("facets", mesh.facets.len());
    let mut s = header.line();
    s.push('\n');
    writeln!(s, "params {}", serde_json::to_string(p).expect("mesh parameters serialise")).unwrap();
    for (name, levels) in [("t_levels", &mesh.t_levels), ("theta_levels", &mesh.theta_levels)] {
        writeln!(s, "{name} {}", levels.len()).unwrap();
        for v in levels {
            writeln!(s, "{v}").unwrap();
        }
    }
    writeln!(s, "nodes {}", mesh.nodes.len()).unwrap();
    for n in &mesh.nodes {
        writeln!(s, "{} {}", n[0], n[1]).unwrap();
    }
    writeln!(s, "cells {}", mesh.cells.len()).unwrap();
    for c in &mesh.cells {
        writeln!(s, "{} {} {} {}", c[0], c[1], c[2], c[3]).unwrap();
    }
    writeln!(s, "facets {}", mesh.facets.len()).unwrap();
    for f in &mesh.facets {
        writeln!(
            s,
            "{} {} {} {} {}",
            f.cell,
            f.side.name(),
            f.nodes[0],
            f.nodes[1],
            f.tag.name()
        )
        .unwrap();
    }
    s
}

pub fn mesh_from_text(text: &str) -> Result<ExteriorMesh> {
    let mut lines = text.lines();
    let header = Header::parse(next_line(&mut lines, "header")?, MESH_SCHEMA)?;
    let params_line = next_line(&mut lines, "params")?;
    let params: MeshParams = serde_json::from_str(
        params_line
            .strip_prefix("params ")
            .ok_or_else(|| Error::Parse("missing params line".into()))?,
    )?;
    if MeshMode::parse(header.get("mode")?) != Some(params.mode) {
        return Err(Error::Parse("header mode disagrees with parameters".into()));
    }
    let mut levels = Vec::new();
    for name in ["t_levels", "theta_levels"] {
        let n = section(&mut lines, name)?;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(num(Some(next_line(&mut lines, name)?), name)?);
        }
        levels.push(v);
    }
    let n = section(&mut lines, "nodes")?;
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut w = next_line(&mut lines, "nodes")?.split(' ');
        nodes.push([num(w.next(), "node x")?, num(w.next(), "node y")?]);
    }
    let n = section(&mut lines, "cells")?;
    let mut cells = Vec::with_capacity(n);
    for _ in 0..n {
        let mut w = next_line(&mut lines, "cells")?.split(' ');
        let mut c = [0usize; 4];
        for v in &mut c {
            *v = num(w.next(), "cell node")?;
        }
        cells.push(c);
    }
    let n = section(&mut lines, "facets")?;
    let mut facets = Vec::with_capacity(n);
    for _ in 0..n {
        let mut w = next_line(&mut lines, "facets")?.split(' ');
        let cell = num(w.next(), "facet cell")?;
        let side = w
            .next()
            .and_then(CellSide::parse)
            .ok_or_else(|| Error::Parse("bad facet side".into()))?;
        let nodes = [num(w.next(), "facet node")?, num(w.next(), "facet node")?];
        let tag = w
            .next()
            .and_then(BoundaryTag::parse)
            .ok_or_else(|| Error::Parse("bad facet tag".into()))?;
        facets.push(Facet { cell, side, nodes, tag });
    }
    let theta_levels = levels.pop().unwrap();
    let t_levels = levels.pop().unwrap();
    let counts = [
        ("nodes", nodes.len()),
        ("cells", cells.len()),
        ("facets", facets.len()),
    ];
    for (k, n) in counts {
        if header.parsed::<usize>(k)? != n {
            return Err(Error::Parse(format!("header {k} count disagrees with table")));
        }
    }
    Ok(ExteriorMesh {
        params,
        t_levels,
        theta_levels,
        nodes,
        cells,
        facets,
    })
}

fn kind_from_name(s: &str) -> Result<PotentialKind> {
    match s {
        "psi_bar" => Ok(PotentialKind::IncompressiblePerturbation),
        "phi_tilde" => Ok(PotentialKind::CompressibleDifference),
        _ => Err(Error::Parse(format!("unknown field kind {s}"))),
    }
}

/// Point cloud `x y weight value` of a nodal field, where `weight` is the
/// measure factor at the node.
pub fn field_to_text(disc: &Discretization, field: &PotentialField, config_hash: &str) -> String {
    let mode = disc.mesh.mode();
    let header = Header::new(FIELD_SCHEMA)
        .with("config", config_hash)
        .with("kind", field.kind.name())
        .with("mode", mode.name())
        .with("nodes", field.values.len())
        .with("residual", field.residual);
    let mut s = header.line();
    s.push('\n');
    s.push_str("x y weight value\n");
    for (x, v) in disc.mesh.nodes.iter().zip(&field.values) {
        writeln!(s, "{} {} {} {}", x[0], x[1], mode.measure_factor(*x), v).unwrap();
    }
    s
}

pub fn field_from_text(text: &str) -> Result<PotentialField> {
    let mut lines = text.lines();
    let header = Header::parse(next_line(&mut lines, "header")?, FIELD_SCHEMA)?;
    let kind = kind_from_name(header.get("kind")?)?;
    let n: usize = header.parsed("nodes")?;
    let residual: f64 = header.parsed("residual")?;
    if next_line(&mut lines, "column")? != "x y weight value" {
        return Err(Error::Parse("unexpected column line".into()));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let v = next_line(&mut lines, "field")?
            .split(' ')
            .nth(3);
        values.push(num(v, "field value")?);
    }
    if lines.next().is_some() {
        return Err(Error::Parse("trailing lines after field table".into()));
    }
    Ok(PotentialField {
        kind,
        values,
        residual,
    })
}

/// Per-node surface quantities on the obstacle, one CSV row per angle.
pub struct SurfaceProfile {
    pub columns: Vec<&'static str>,
    /// `(node, values)` with one value per column.
    pub rows: Vec<(usize, Vec<f64>)>,
}

pub fn surface_csv(disc: &Discretization, profile: &SurfaceProfile, config_hash: &str) -> String {
    let header = Header::new(SURFACE_SCHEMA)
        .with("config", config_hash)
        .with("mode", disc.mesh.mode().name());
    let mut s = header.line();
    s.push('\n');
    s.push_str("theta,x1,x2");
    for c in &profile.columns {
        write!(s, ",{c}").unwrap();
    }
    s.push('\n');
    let mesh = &disc.mesh;
    for (node, vals) in &profile.rows {
        let j = node % mesh.angular_nodes();
        let x = mesh.nodes[*node];
        write!(s, "{},{},{}", mesh.theta_levels[j], x[0], x[1]).unwrap();
        for v in vals {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Obstacle nodes in angular order.
pub fn obstacle_nodes(mesh: &ExteriorMesh) -> Vec<usize> {
    (0..mesh.angular_nodes()).map(|j| mesh.node_index(0, j)).collect()
}

/// Writes `contents` to `dir/name`, creating `dir` when needed.
pub fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, ObstacleShape};
    use crate::incompressible::{solve_incompressible, FarFieldCondition};

    #[test]
    fn mesh_round_trip_is_exact() {
        for (shape, mode) in [
            (ObstacleShape::Sphere { radius: 1.0 }, MeshMode::Axisymmetric3d),
            (ObstacleShape::Ellipse { semi_x: 1.3, semi_y: 0.7 }, MeshMode::Planar2d),
        ] {
            let mesh = build_mesh(shape, 10.0, 7, 9, 1.13, mode).unwrap();
            let text = mesh_to_text(&mesh, "h");
            let back = mesh_from_text(&text).unwrap();
            assert_eq!(back, mesh);
            assert_eq!(mesh_to_text(&back, "h"), text);
        }
    }

    #[test]
    fn field_round_trip_is_exact() {
        let disc = Discretization::new(
            build_mesh(ObstacleShape::Sphere { radius: 1.0 }, 10.0, 8, 8, 1.1, MeshMode::Axisymmetric3d).unwrap(),
        );
        let psi = solve_incompressible(&disc, 1.0, FarFieldCondition::Dirichlet).unwrap();
        let text = field_to_text(&disc, &psi, "abc");
        assert!(text.starts_with("# lowmach-field/1 config=abc kind=psi_bar"));
        assert_eq!(field_from_text(&text).unwrap(), psi);
    }

    #[test]
    fn malformed_dumps_are_rejected() {
        let mesh = build_mesh(ObstacleShape::Sphere { radius: 1.0 }, 10.0, 4, 4, 1.1, MeshMode::Axisymmetric3d).unwrap();
        let text = mesh_to_text(&mesh, "h");
        assert!(mesh_from_text(&text.replace(MESH_SCHEMA, "lowmach-mesh/9")).is_err());
        let cut: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(mesh_from_text(&cut).is_err());
        assert!(field_from_text("# lowmach-field/1 config=x kind=psi_bar nodes=2 residual=0\nx y weight value\n0 0 1 1\n").is_err());
    }
}
