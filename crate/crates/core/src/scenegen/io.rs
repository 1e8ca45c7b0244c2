//! Line-delimited JSON dataset files.
//!
//! Line 1 is a header `{"format":"bevground-scenes","version":1}`; every
//! following line is one scenario. Floats are written in shortest
//! round-trip form, so `load(save(d)) == d` bit for bit.

use super::{Category, Color, ObjectSpec, Relation, Role, Scenario};
use crate::geometry::Box3D;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_NAME: &str = "bevground-scenes";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    category: Category,
    attribute: Color,
    role: Role,
    is_target: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioRecord {
    id: String,
    points: Vec<f64>,
    objects: Vec<ObjectRecord>,
    description: String,
    relation: Option<Relation>,
    template: usize,
}

impl From<&Scenario> for ScenarioRecord {
    fn from(s: &Scenario) -> Self {
        Self {
            id: s.id.clone(),
            points: s.points.iter().flatten().copied().collect(),
            objects: s
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    center: o.bbox.center(),
                    size: o.bbox.size(),
                    yaw: o.bbox.yaw,
                    category: o.category,
                    attribute: o.attribute,
                    role: o.role,
                    is_target: o.is_target(),
                })
                .collect(),
            description: s.description.clone(),
            relation: s.relation,
            template: s.template,
        }
    }
}

impl ScenarioRecord {
    fn into_scenario(self) -> Result<Scenario, String> {
        if self.points.len() % 4 != 0 {
            return Err(format!(
                "points array length {} is not a multiple of 4",
                self.points.len()
            ));
        }
        let targets = self.objects.iter().filter(|o| o.is_target).count();
        if targets != 1 {
            return Err(format!("expected exactly one target object, found {targets}"));
        }
        let mut objects = Vec::with_capacity(self.objects.len());
        for (i, o) in self.objects.into_iter().enumerate() {
            if o.is_target != (o.role == Role::Target) {
                return Err(format!("object {i}: is_target disagrees with role"));
            }
            let bbox = Box3D::new(o.center, o.size, o.yaw).map_err(|e| format!("object {i}: {e}"))?;
            objects.push(ObjectSpec {
                bbox,
                category: o.category,
                attribute: o.attribute,
                role: o.role,
            });
        }
        Ok(Scenario {
            id: self.id,
            objects,
            points: self
                .points
                .chunks_exact(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect(),
            description: self.description,
            relation: self.relation,
            template: self.template,
        })
    }
}

pub fn write_dataset<W: Write>(mut out: W, scenarios: &[Scenario]) -> std::io::Result<()> {
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in scenarios {
        serde_json::to_writer(&mut out, &ScenarioRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn parse_dataset<R: BufRead>(input: R) -> Result<Vec<Scenario>, DatasetError> {
    let mut scenarios = Vec::new();
    let mut saw_header = false;
    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DatasetError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| DatasetError::Parse {
            line: lineno,
            message,
        };
        if !saw_header {
            let h: Header = serde_json::from_str(&line)
                .map_err(|e| err(format!("bad header: {e}")))?;
            if h.format != FORMAT_NAME || h.version != FORMAT_VERSION {
                return Err(err(format!(
                    "unsupported format {} v{} (expected {FORMAT_NAME} v{FORMAT_VERSION})",
                    h.format, h.version
                )));
            }
            saw_header = true;
            continue;
        }
        let record: ScenarioRecord =
            serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        scenarios.push(record.into_scenario().map_err(err)?);
    }
    if !saw_header {
        return Err(DatasetError::Parse {
            line: 1,
            message: "missing format header".into(),
        });
    }
    Ok(scenarios)
}

pub fn save(path: &Path, scenarios: &[Scenario]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    write_dataset(std::io::BufWriter::new(file), scenarios).map_err(io_err)
}

pub fn load(path: &Path) -> Result<Vec<Scenario>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(BufReader::new(file))
}
