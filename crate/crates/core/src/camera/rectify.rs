//! Cylindrical rectification of distorted images.
//!
//! The virtual cylinder camera maps columns linearly to azimuth about the
//! camera's vertical axis and rows to the tangent of elevation, so vertical
//! scene lines stay vertical.

use nalgebra::{Point2, Vector3};
use ndarray::{Array2, Array3, ArrayView3};
use rayon::prelude::*;

use super::CameraIntrinsics;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylinderConfig {
    pub width: usize,
    pub height: usize,
    /// Pixels per radian of azimuth.
    pub fx: f64,
    /// Pixels per unit of elevation tangent.
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Value written to output pixels with no valid source.
    pub fill: f64,
}

impl CylinderConfig {
    /// Output of `width x height` spanning `hfov` of azimuth and `vfov` of
    /// elevation (radians), centered on the optical axis.
    pub fn covering(width: usize, height: usize, hfov: f64, vfov: f64) -> Result<Self> {
        if !(hfov > 0.0) || !(vfov > 0.0 && vfov < std::f64::consts::PI) {
            return Err(Error::config(format!("invalid cylinder FOV {hfov} x {vfov}")));
        }
        let cfg = Self {
            width,
            height,
            fx: width as f64 / hfov,
            fy: 0.5 * height as f64 / (0.5 * vfov).tan(),
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            fill: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("cylinder output must be at least 1x1"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::config("cylinder focal lengths must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite() && self.fill.is_finite()) {
            return Err(Error::config("cylinder center and fill must be finite"));
        }
        Ok(())
    }
}

/// Virtual intrinsics of a rectified image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylinderCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CylinderCamera {
    pub fn pixel_to_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let azimuth = (u - self.cx) / self.fx;
        let t = (v - self.cy) / self.fy;
        let (s, c) = azimuth.sin_cos();
        Vector3::new(s, t, c).normalize()
    }

    /// Inverse of [`pixel_to_ray`](Self::pixel_to_ray); `None` for rays
    /// parallel to the cylinder axis.
    pub fn ray_to_pixel(&self, dir: &Vector3<f64>) -> Option<Point2<f64>> {
        let rho = dir.x.hypot(dir.z);
        if rho == 0.0 {
            return None;
        }
        Some(Point2::new(
            self.cx + self.fx * dir.x.atan2(dir.z),
            self.cy + self.fy * dir.y / rho,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone)]
pub struct Rectified {
    /// `H x W x C` resampled image.
    pub image: Array3<f64>,
    /// `H x W` mask of output pixels with a valid source sample.
    pub valid: Array2<bool>,
    pub camera: CylinderCamera,
}

/// Resamples an `H x W x C` image from `intr` onto a virtual cylinder.
pub fn cylindrical_rectify(
    intr: &CameraIntrinsics,
    image: ArrayView3<'_, f64>,
    cfg: &CylinderConfig,
    sampling: Sampling,
) -> Result<Rectified> {
    cfg.validate()?;
    let (h, w, channels) = image.dim();
    if h != intr.height || w != intr.width {
        return Err(Error::shape(format!(
            "image is {h}x{w}, intrinsics expect {}x{}",
            intr.height, intr.width
        )));
    }
    let camera = CylinderCamera {
        fx: cfg.fx,
        fy: cfg.fy,
        cx: cfg.cx,
        cy: cfg.cy,
        width: cfg.width,
        height: cfg.height,
    };
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..cfg.height)
        .into_par_iter()
        .map(|i| {
            let mut out = vec![cfg.fill; cfg.width * channels];
            let mut ok = vec![false; cfg.width];
            for j in 0..cfg.width {
                let ray = camera.pixel_to_ray(j as f64 + 0.5, i as f64 + 0.5);
                let px = match intr.ray_to_pixel(&ray) {
                    Ok(Some(px)) if intr.contains(px.x, px.y) => px,
                    _ => continue,
                };
                let dst = &mut out[j * channels..(j + 1) * channels];
                match sampling {
                    Sampling::Bilinear => sample_bilinear(image, px.x, px.y, dst),
                    Sampling::Nearest => sample_nearest(image, px.x, px.y, dst),
                }
                ok[j] = true;
            }
            (out, ok)
        })
        .collect();
    let mut out = Array3::from_elem((cfg.height, cfg.width, channels), cfg.fill);
    let mut valid = Array2::from_elem((cfg.height, cfg.width), false);
    for (i, (vals, ok)) in rows.into_iter().enumerate() {
        for j in 0..cfg.width {
            valid[(i, j)] = ok[j];
            for c in 0..channels {
                out[(i, j, c)] = vals[j * channels + c];
            }
        }
    }
    Ok(Rectified { image: out, valid, camera })
}

fn sample_bilinear(image: ArrayView3<'_, f64>, u: f64, v: f64, dst: &mut [f64]) {
    let (h, w, _) = image.dim();
    let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    for (c, d) in dst.iter_mut().enumerate() {
        let top = image[(y0, x0, c)] * (1.0 - fx) + image[(y0, x1, c)] * fx;
        let bottom = image[(y1, x0, c)] * (1.0 - fx) + image[(y1, x1, c)] * fx;
        *d = top * (1.0 - fy) + bottom * fy;
    }
}

fn sample_nearest(image: ArrayView3<'_, f64>, u: f64, v: f64, dst: &mut [f64]) {
    let (h, w, _) = image.dim();
    let j = (u.floor().max(0.0) as usize).min(w - 1);
    let i = (v.floor().max(0.0) as usize).min(h - 1);
    for (c, d) in dst.iter_mut().enumerate() {
        *d = image[(i, j, c)];
    }
}
