//! Per-pixel ray grids and the lift of image features into 3D points.

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraExtrinsics, CameraIntrinsics, CylinderCamera};
use crate::error::{Error, Result};

/// Unit viewing directions at the source-pixel center of every feature cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RayGrid {
    hf: usize,
    wf: usize,
    stride: usize,
    dirs: Vec<Vector3<f64>>,
    valid: Vec<bool>,
}

impl RayGrid {
    pub fn height(&self) -> usize {
        self.hf
    }

    pub fn width(&self) -> usize {
        self.wf
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn dir(&self, i: usize, j: usize) -> &Vector3<f64> {
        &self.dirs[i * self.wf + j]
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.wf + j]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Row-major `(dir, valid)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&Vector3<f64>, bool)> {
        self.dirs.iter().zip(self.valid.iter().copied())
    }

    /// Builds a grid for a cylindrical virtual camera; every cell is valid.
    pub fn from_cylinder(cam: &CylinderCamera, feature_size: (usize, usize)) -> Result<Self> {
        let stride = stride_for(cam.width, cam.height, feature_size)?;
        let (hf, wf) = feature_size;
        let mut dirs = Vec::with_capacity(hf * wf);
        for (u, v) in cell_centers(hf, wf, stride) {
            dirs.push(cam.pixel_to_ray(u, v));
        }
        Ok(Self {
            hf,
            wf,
            stride,
            valid: vec![true; dirs.len()],
            dirs,
        })
    }
}

/// Integer stride mapping an image to a feature map. The width must divide
/// exactly; a height remainder smaller than one stride is cropped from the
/// bottom of the image.
fn stride_for(width: usize, height: usize, (hf, wf): (usize, usize)) -> Result<usize> {
    if hf == 0 || wf == 0 {
        return Err(Error::config("feature map must be at least 1x1"));
    }
    if width % wf != 0 {
        return Err(Error::config(format!(
            "feature width {wf} does not divide image width {width}"
        )));
    }
    let stride = width / wf;
    if height / stride != hf {
        return Err(Error::config(format!(
            "feature height {hf} does not match image height {height} at stride {stride}"
        )));
    }
    Ok(stride)
}

fn cell_centers(hf: usize, wf: usize, stride: usize) -> impl Iterator<Item = (f64, f64)> {
    let s = stride as f64;
    (0..hf).flat_map(move |i| (0..wf).map(move |j| ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)))
}

/// Precomputes the viewing ray of every feature cell of one camera.
pub fn build_ray_grid(intr: &CameraIntrinsics, feature_size: (usize, usize)) -> Result<RayGrid> {
    let stride = stride_for(intr.width, intr.height, feature_size)?;
    let (hf, wf) = feature_size;
    let mut dirs = Vec::with_capacity(hf * wf);
    let mut valid = Vec::with_capacity(hf * wf);
    for (u, v) in cell_centers(hf, wf, stride) {
        match intr.pixel_to_ray(u, v) {
            Ok(d) => {
                dirs.push(d);
                valid.push(true);
            }
            Err(Error::OutOfFov(_)) => {
                dirs.push(Vector3::zeros());
                valid.push(false);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RayGrid { hf, wf, stride, dirs, valid })
}

/// Uniform depth bins `[d_min + k·step, d_min + (k+1)·step)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DepthBinsFields", into = "DepthBinsFields")]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub step: f64,
    centers: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DepthBinsFields {
    d_min: f64,
    d_max: f64,
    step: f64,
}

impl TryFrom<DepthBinsFields> for DepthBins {
    type Error = Error;

    fn try_from(f: DepthBinsFields) -> Result<Self> {
        DepthBins::new(f.d_min, f.d_max, f.step)
    }
}

impl From<DepthBins> for DepthBinsFields {
    fn from(b: DepthBins) -> Self {
        DepthBinsFields {
            d_min: b.d_min,
            d_max: b.d_max,
            step: b.step,
        }
    }
}

impl Default for DepthBins {
    fn default() -> Self {
        Self::new(0.5, 25.0, 0.5).expect("default bins are valid")
    }
}

impl DepthBins {
    pub fn new(d_min: f64, d_max: f64, step: f64) -> Result<Self> {
        if !(d_min > 0.0 && step > 0.0 && d_max > d_min && d_max.is_finite()) {
            return Err(Error::config(format!(
                "invalid depth bins d_min={d_min} d_max={d_max} step={step}"
            )));
        }
        let n = ((d_max - d_min) / step - 1e-9).ceil() as usize;
        let centers = (0..n).map(|k| d_min + (k as f64 + 0.5) * step).collect();
        Ok(Self { d_min, d_max, step, centers })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Bin holding `depth`, with a flag set when the depth was clamped into
    /// the first or last bin. `None` for non-finite depths.
    pub fn bin_of(&self, depth: f64) -> Option<(usize, bool)> {
        if !depth.is_finite() {
            return None;
        }
        let k = ((depth - self.d_min) / self.step).floor();
        let last = self.len() - 1;
        if k < 0.0 {
            Some((0, true))
        } else if k as usize > last {
            Some((last, true))
        } else {
            Some((k as usize, false))
        }
    }
}

/// Which (pixel, bin) pairs become points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LiftMode {
    /// One point per valid pixel and bin.
    #[default]
    Dense,
    /// Skip bins whose depth weight is exactly zero.
    NonZero,
}

/// Lifted points in the vehicle frame, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPoints {
    pub positions: Vec<[f64; 3]>,
    /// `N x C` lifted features.
    pub features: Array2<f64>,
    /// Depth weight each point's feature was scaled by.
    pub weights: Vec<f64>,
    pub camera_id: Vec<u32>,
    pub pixel_id: Vec<u32>,
    pub bin_id: Vec<u32>,
}

impl LiftedPoints {
    pub fn empty(channels: usize) -> Self {
        Self {
            positions: Vec::new(),
            features: Array2::zeros((0, channels)),
            weights: Vec::new(),
            camera_id: Vec::new(),
            pixel_id: Vec::new(),
            bin_id: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    /// Concatenates point sets in the given order.
    pub fn concat(parts: &[LiftedPoints]) -> Result<Self> {
        let channels = parts.first().map_or(0, |p| p.channels());
        if parts.iter().any(|p| p.channels() != channels) {
            return Err(Error::shape("cannot concatenate points with different channel counts"));
        }
        let n: usize = parts.iter().map(|p| p.len()).sum();
        let mut features = Vec::with_capacity(n * channels);
        let mut out = Self::empty(channels);
        for p in parts {
            out.positions.extend_from_slice(&p.positions);
            features.extend(p.features.iter().copied());
            out.weights.extend_from_slice(&p.weights);
            out.camera_id.extend_from_slice(&p.camera_id);
            out.pixel_id.extend_from_slice(&p.pixel_id);
            out.bin_id.extend_from_slice(&p.bin_id);
        }
        out.features = Array2::from_shape_vec((n, channels), features)
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(out)
    }
}

/// Spreads each valid pixel's feature along its ray: the point for bin `d`
/// sits at `R·(dir·center_d) + t` and carries `feature·depth_dist[d]`.
pub fn lift_points(
    rays: &RayGrid,
    extr: &CameraExtrinsics,
    bins: &DepthBins,
    features: ArrayView3<'_, f64>,
    depth_dist: ArrayView3<'_, f64>,
    camera_id: u32,
    mode: LiftMode,
) -> Result<LiftedPoints> {
    let (hf, wf, channels) = features.dim();
    if (hf, wf) != (rays.hf, rays.wf) {
        return Err(Error::shape(format!(
            "features are {hf}x{wf}, ray grid is {}x{}",
            rays.hf, rays.wf
        )));
    }
    let (dh, dw, nbins) = depth_dist.dim();
    if (dh, dw) != (hf, wf) || nbins != bins.len() {
        return Err(Error::shape(format!(
            "depth distribution is {dh}x{dw}x{nbins}, expected {hf}x{wf}x{}",
            bins.len()
        )));
    }
    if let Some(w) = depth_dist.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::domain(format!("depth weights must be >= 0, found {w}")));
    }

    let mut out = LiftedPoints::empty(channels);
    let mut feats = Vec::new();
    let rotation = extr.rotation();
    let translation = extr.translation();
    for i in 0..hf {
        for j in 0..wf {
            if !rays.is_valid(i, j) {
                continue;
            }
            let dir = rotation * rays.dir(i, j);
            let pixel = (i * wf + j) as u32;
            for (d, &center) in bins.centers().iter().enumerate() {
                let w = depth_dist[(i, j, d)];
                if mode == LiftMode::NonZero && w == 0.0 {
                    continue;
                }
                let p = dir * center + translation;
                out.positions.push([p.x, p.y, p.z]);
                feats.extend((0..channels).map(|c| features[(i, j, c)] * w));
                out.weights.push(w);
                out.camera_id.push(camera_id);
                out.pixel_id.push(pixel);
                out.bin_id.push(d as u32);
            }
        }
    }
    let n = out.positions.len();
    out.features =
        Array2::from_shape_vec((n, channels), feats).map_err(|e| Error::shape(e.to_string()))?;
    Ok(out)
}

/// [`lift_points`] in [`LiftMode::NonZero`] for one-hot depth: each valid
/// pixel with `Some(bin)` yields one point at that bin with weight 1.
pub fn lift_one_hot(
    rays: &RayGrid,
    extr: &CameraExtrinsics,
    bins: &DepthBins,
    features: ArrayView3<'_, f64>,
    depth_bin: ArrayView2<'_, Option<usize>>,
    camera_id: u32,
) -> Result<LiftedPoints> {
    let (hf, wf, channels) = features.dim();
    if (hf, wf) != (rays.hf, rays.wf) || depth_bin.dim() != (hf, wf) {
        return Err(Error::shape(format!(
            "features {hf}x{wf}, depth {:?}, ray grid {}x{}",
            depth_bin.dim(),
            rays.hf,
            rays.wf
        )));
    }
    if let Some(d) = depth_bin.iter().flatten().find(|&&d| d >= bins.len()) {
        return Err(Error::domain(format!("depth bin {d} out of {} bins", bins.len())));
    }
    let mut out = LiftedPoints::empty(channels);
    let mut feats = Vec::new();
    let rotation = extr.rotation();
    let translation = extr.translation();
    for i in 0..hf {
        for j in 0..wf {
            let Some(d) = depth_bin[(i, j)] else { continue };
            if !rays.is_valid(i, j) {
                continue;
            }
            let p = rotation * rays.dir(i, j) * bins.centers()[d] + translation;
            out.positions.push([p.x, p.y, p.z]);
            feats.extend((0..channels).map(|c| features[(i, j, c)]));
            out.weights.push(1.0);
            out.camera_id.push(camera_id);
            out.pixel_id.push((i * wf + j) as u32);
            out.bin_id.push(d as u32);
        }
    }
    let n = out.positions.len();
    out.features =
        Array2::from_shape_vec((n, channels), feats).map_err(|e| Error::shape(e.to_string()))?;
    Ok(out)
}
