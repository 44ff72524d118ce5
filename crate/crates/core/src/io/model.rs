//! Model directories: one splat file per level, a JSON manifest and the
//! training event log.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::defaults::Defaults;
use crate::error::{Error, Result};
use crate::model::MultiLevelModel;
use crate::trainer::TrainEvent;

use super::cameras::json_error;
use super::splat::{load_level, save_level, LevelFile};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const EVENT_LOG_NAME: &str = "events.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelEntry {
    pub level: u32,
    pub s_min: f64,
    pub file: String,
    pub gaussians: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub tau: f64,
    pub rho: f64,
    pub l_max: u32,
    pub levels: Vec<LevelEntry>,
    /// SHA-256 of the training configuration.
    pub config_digest: String,
    pub defaults: Defaults,
    /// Mean training camera center, the default selective-rendering
    /// reference position.
    pub reference_position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_log: Option<String>,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = serde_json::from_str(text).map_err(|e| json_error(text, e))?;
        if probe.version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Version { found: probe.version, expected: MANIFEST_FORMAT_VERSION });
        }
        let m: Manifest = serde_json::from_str(text).map_err(|e| json_error(text, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != self.l_max as usize {
            return Err(Error::Validation(format!(
                "manifest lists {} levels for l_max {}",
                self.levels.len(),
                self.l_max
            )));
        }
        for (i, e) in self.levels.iter().enumerate() {
            let expected = crate::model::scale_constraint(i as u32 + 1, self.tau, self.rho, self.l_max)?;
            if e.level != i as u32 + 1 || e.s_min != expected {
                return Err(Error::Validation(format!(
                    "manifest entry {i} is level {} with s_min {}, expected level {} with s_min {expected}",
                    e.level,
                    e.s_min,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(dir.as_ref().join(MANIFEST_NAME))?)
    }
}

pub fn level_file_name(level: u32) -> String {
    format!("level_{level}.ply")
}

/// Everything written alongside the level files.
#[derive(Debug, Clone, Copy)]
pub struct ModelMeta<'a> {
    pub config_digest: &'a str,
    pub defaults: Defaults,
    pub reference_position: [f64; 3],
    pub events: Option<&'a [TrainEvent]>,
}

/// Writes a model directory and returns its manifest. Output depends only on
/// the inputs.
pub fn save_model(dir: impl AsRef<Path>, model: &MultiLevelModel, meta: ModelMeta<'_>) -> Result<Manifest> {
    let dir = dir.as_ref();
    model.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut levels = Vec::new();
    for set in &model.levels {
        let file = level_file_name(set.level);
        let lf = LevelFile { set: set.clone(), tau: model.tau, rho: model.rho, l_max: model.l_max };
        save_level(dir.join(&file), &lf)?;
        levels.push(LevelEntry { level: set.level, s_min: set.s_min, file, gaussians: set.len() });
    }
    let event_log = match meta.events {
        Some(events) => {
            write_event_log(dir.join(EVENT_LOG_NAME), events)?;
            Some(EVENT_LOG_NAME.to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        version: MANIFEST_FORMAT_VERSION,
        tau: model.tau,
        rho: model.rho,
        l_max: model.l_max,
        levels,
        config_digest: meta.config_digest.to_string(),
        defaults: meta.defaults,
        reference_position: meta.reference_position,
        event_log,
    };
    std::fs::write(dir.join(MANIFEST_NAME), manifest.to_json()?)?;
    Ok(manifest)
}

/// Loads the manifest and every level it lists.
pub fn load_model(dir: impl AsRef<Path>) -> Result<(Manifest, MultiLevelModel)> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir)?;
    let mut levels = Vec::new();
    for e in &manifest.levels {
        let lf = load_level(dir.join(&e.file))?;
        if lf.set.level != e.level || lf.tau != manifest.tau || lf.rho != manifest.rho || lf.l_max != manifest.l_max {
            return Err(Error::Validation(format!("{} does not match the manifest", e.file)));
        }
        if lf.set.len() != e.gaussians {
            return Err(Error::Validation(format!(
                "{} holds {} Gaussians, manifest says {}",
                e.file,
                lf.set.len(),
                e.gaussians
            )));
        }
        levels.push(lf.set);
    }
    let model = MultiLevelModel::new(levels, manifest.tau, manifest.rho, manifest.l_max)?;
    Ok((manifest, model))
}

pub fn write_event_log(path: impl AsRef<Path>, events: &[TrainEvent]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_event_log(path: impl AsRef<Path>) -> Result<Vec<TrainEvent>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut events = Vec::new();
    let mut offset = 0u64;
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            let e = serde_json::from_str(&line)
                .map_err(|e| Error::parse(offset + e.column().saturating_sub(1) as u64, e.to_string()))?;
            events.push(e);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(events)
}
