//! TOML rig files: the BEV grid, depth bins and camera calibrations.
//!
//! ```toml
//! [grid]
//! x_min = -25.0
//! x_max = 25.0
//! y_min = -25.0
//! y_max = 25.0
//! cell = 0.25
//!
//! [depth]
//! d_min = 1.0
//! d_max = 40.0
//! step = 0.5
//!
//! [[camera]]
//! name = "front"
//! model = "eucm"            # polynomial | ucm | eucm | rectilinear | stereographic | double_sphere
//! coefficients = [0.6, 1.1]
//! f = 150.0
//! cx = 240.0
//! cy = 151.0
//! width = 480
//! height = 302
//! theta_max = 1.9           # optional
//! inverse_poly = [...]      # optional, nine coefficients
//! rotation = [0, 0, 1, -1, 0, 0, 0, -1, 0]   # camera to vehicle, row-major
//! translation = [2.0, 0.0, 1.5]
//! ```

use std::ops::Range;
use std::path::Path;

use fbev_core::camera::{Camera, CameraExtrinsics, CameraIntrinsics, DistortionModel, ModelKind, Projection};
use fbev_core::lift::DepthBins;
use fbev_core::pool::GridSpec;
use fbev_core::Error;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::fsutil::read_text;

/// Largest allowed disagreement, in pixels, between a supplied inverse
/// polynomial and the forward model.
pub const INVERSE_POLY_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub name: String,
    pub model: String,
    #[serde(default)]
    pub coefficients: Vec<f64>,
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inverse_poly: Option<Vec<f64>>,
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
}

impl CameraEntry {
    pub fn from_camera(cam: &Camera) -> Self {
        let m = &cam.intrinsics.model;
        let r = cam.extrinsics.rotation();
        let t = cam.extrinsics.translation();
        Self {
            name: cam.name.clone(),
            model: m.kind().name().to_string(),
            coefficients: m.projection().coefficients(),
            f: m.focal(),
            cx: cam.intrinsics.cx,
            cy: cam.intrinsics.cy,
            width: cam.intrinsics.width,
            height: cam.intrinsics.height,
            theta_max: Some(m.theta_max()),
            inverse_poly: m.inverse_poly().map(|p| p.to_vec()),
            rotation: (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])).collect(),
            translation: t.iter().copied().collect(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera, Error> {
        let kind: ModelKind = self.model.parse()?;
        let projection = Projection::from_coefficients(kind, &self.coefficients)?;
        let theta_max = self.theta_max.unwrap_or(kind.default_theta_max());
        let mut model = DistortionModel::new(projection, self.f, theta_max)?;
        if let Some(p) = &self.inverse_poly {
            let p: [f64; 9] = p
                .as_slice()
                .try_into()
                .map_err(|_| Error::Config(format!("inverse_poly needs 9 coefficients, got {}", p.len())))?;
            model = model.with_inverse_poly(p, INVERSE_POLY_TOLERANCE)?;
        }
        if self.rotation.len() != 9 {
            return Err(Error::Config(format!("rotation needs 9 numbers, got {}", self.rotation.len())));
        }
        if self.translation.len() != 3 {
            return Err(Error::Config(format!("translation needs 3 numbers, got {}", self.translation.len())));
        }
        Ok(Camera {
            name: self.name.clone(),
            intrinsics: CameraIntrinsics::new(model, self.cx, self.cy, self.width, self.height)?,
            extrinsics: CameraExtrinsics::new(
                Matrix3::from_row_slice(&self.rotation),
                Vector3::from_column_slice(&self.translation),
            )?,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRig {
    grid: GridSpec,
    depth: DepthBins,
    camera: Vec<Spanned<CameraEntry>>,
}

#[derive(Debug, Serialize)]
struct RigOut<'a> {
    grid: &'a GridSpec,
    depth: &'a DepthBins,
    camera: Vec<CameraEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub grid: GridSpec,
    pub depth: DepthBins,
    pub cameras: Vec<Camera>,
}

/// 1-based line of byte `offset` in `text`.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn located(path: &Path, text: &str, span: Option<Range<usize>>, message: impl std::fmt::Display) -> Error {
    let at = match span {
        Some(s) => format!("{}:{}", path.display(), line_of(text, s.start)),
        None => path.display().to_string(),
    };
    Error::File {
        path: at,
        message: message.to_string(),
    }
}

impl Rig {
    /// Parses and validates a rig document; `path` only labels diagnostics.
    pub fn parse(text: &str, path: &Path) -> Result<Self, Error> {
        let raw: RawRig = toml::from_str(text).map_err(|e| located(path, text, e.span(), e.message()))?;
        if raw.camera.is_empty() {
            return Err(located(path, text, None, "no [[camera]] entries"));
        }
        let mut cameras = Vec::with_capacity(raw.camera.len());
        for entry in &raw.camera {
            let cam = entry
                .get_ref()
                .to_camera()
                .map_err(|e| located(path, text, Some(entry.span()), format!("camera '{}': {e}", entry.get_ref().name)))?;
            if cameras.iter().any(|c: &Camera| c.name == cam.name) {
                return Err(located(path, text, Some(entry.span()), format!("duplicate camera name '{}'", cam.name)));
            }
            cameras.push(cam);
        }
        Ok(Self {
            grid: raw.grid,
            depth: raw.depth,
            cameras,
        })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        let out = RigOut {
            grid: &self.grid,
            depth: &self.depth,
            camera: self.cameras.iter().map(CameraEntry::from_camera).collect(),
        };
        toml::to_string(&out).expect("rig serializes")
    }
}
