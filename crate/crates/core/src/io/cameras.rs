//! Camera lists as JSON documents.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, DEFAULT_NEAR};
use crate::error::{Error, Result};

pub const CAMERA_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World-to-camera rotation, `wxyz`.
    pub rotation: [f64; 4],
    /// World-to-camera translation.
    pub translation: [f64; 3],
    #[serde(default = "default_near")]
    pub near: f64,
    /// Image path relative to the camera file, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

fn default_near() -> f64 {
    DEFAULT_NEAR
}

impl CameraEntry {
    pub fn new(id: impl Into<String>, cam: &Camera, image: Option<String>) -> Self {
        Self {
            id: id.into(),
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            rotation: cam.rotation,
            translation: cam.translation,
            near: cam.near,
            image,
        }
    }

    pub fn camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: self.rotation,
            translation: self.translation,
            width: self.width,
            height: self.height,
            near: self.near,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub version: u32,
    pub cameras: Vec<CameraEntry>,
}

impl CameraFile {
    pub fn new(cameras: Vec<CameraEntry>) -> Self {
        Self { version: CAMERA_FORMAT_VERSION, cameras }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = serde_json::from_str(text).map_err(|e| json_error(text, e))?;
        if probe.version != CAMERA_FORMAT_VERSION {
            return Err(Error::Version { found: probe.version, expected: CAMERA_FORMAT_VERSION });
        }
        let file: CameraFile = serde_json::from_str(text).map_err(|e| json_error(text, e))?;
        for c in &file.cameras {
            c.camera()
                .validate()
                .map_err(|e| Error::Validation(format!("camera {}: {e}", c.id)))?;
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Converts a JSON error into a parse error at the byte offset of its line
/// and column.
pub(crate) fn json_error(text: &str, e: serde_json::Error) -> Error {
    let line_start: usize = text.split_inclusive('\n').take(e.line().saturating_sub(1)).map(str::len).sum();
    Error::parse((line_start + e.column().saturating_sub(1)) as u64, e.to_string())
}
