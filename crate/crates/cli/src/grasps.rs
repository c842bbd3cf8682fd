//! Grasp files: one JSON object per line, tagged "t2g-grasps/1".

use partgrasp::hand::GraspVector;
use partgrasp::objects::{check_category, generate_object, PartLabeledObject};
use partgrasp::synth::DatasetRecord;
use partgrasp::Error;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const GRASPS_SCHEMA: &str = "t2g-grasps/1";

/// `category:seed`, the deterministic name of a synthetic object.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectSpec {
    pub category: String,
    pub seed: u64,
}

impl ObjectSpec {
    pub fn of(object: &PartLabeledObject) -> Self {
        Self {
            category: object.category.clone(),
            seed: object.seed,
        }
    }

    pub fn generate(&self) -> partgrasp::Result<PartLabeledObject> {
        generate_object(&self.category, self.seed)
    }
}

impl FromStr for ObjectSpec {
    type Err = Error;
    fn from_str(s: &str) -> partgrasp::Result<Self> {
        let (cat, seed) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidInput(format!("object spec `{s}` is not category:seed")))?;
        check_category(cat)?;
        let seed = seed
            .parse()
            .map_err(|_| Error::InvalidInput(format!("object spec `{s}`: seed is not an unsigned integer")))?;
        Ok(Self {
            category: cat.to_string(),
            seed,
        })
    }
}

impl fmt::Display for ObjectSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.category, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspLine {
    pub schema: String,
    pub object: String,
    pub text: String,
    pub grasp: GraspVector,
}

impl GraspLine {
    pub fn new(spec: &ObjectSpec, text: &str, grasp: GraspVector) -> Self {
        Self {
            schema: GRASPS_SCHEMA.into(),
            object: spec.to_string(),
            text: text.to_string(),
            grasp,
        }
    }

    pub fn spec(&self) -> partgrasp::Result<ObjectSpec> {
        self.object.parse()
    }
}

#[derive(Deserialize)]
struct SchemaTag {
    schema: String,
}

pub fn write_grasps(lines: &[GraspLine], path: &Path) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for l in lines {
        serde_json::to_writer(&mut buf, l).map_err(partgrasp::Error::from)?;
        buf.write_all(b"\n").expect("writing to a Vec");
    }
    crate::write_file(path, &buf)
}

pub fn read_grasps(path: &Path) -> Result<Vec<GraspLine>, CliError> {
    crate::require_input(path)?;
    let f = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |e: serde_json::Error| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        };
        // the tag is checked before the body so other versions report as such
        let tag: SchemaTag = serde_json::from_str(&line).map_err(malformed)?;
        if tag.schema != GRASPS_SCHEMA {
            return Err(Error::VersionMismatch {
                expected: GRASPS_SCHEMA.into(),
                found: tag.schema,
            }
            .into());
        }
        let g: GraspLine = serde_json::from_str(&line).map_err(malformed)?;
        g.spec().map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(g);
    }
    Ok(out)
}

/// Objects for a set of grasp lines: taken from `dataset` when it holds the
/// spec, regenerated otherwise.
pub struct ObjectCache {
    objects: BTreeMap<ObjectSpec, PartLabeledObject>,
}

impl ObjectCache {
    pub fn new(dataset: &[DatasetRecord]) -> Self {
        Self {
            objects: dataset.iter().map(|r| (ObjectSpec::of(&r.object), r.object.clone())).collect(),
        }
    }

    pub fn get(&mut self, spec: &ObjectSpec) -> partgrasp::Result<&PartLabeledObject> {
        if !self.objects.contains_key(spec) {
            let o = spec.generate()?;
            self.objects.insert(spec.clone(), o);
        }
        Ok(&self.objects[spec])
    }
}
