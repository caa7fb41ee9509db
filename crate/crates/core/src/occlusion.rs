//! Occlusion probability from splat coverage.
//!
//! Point counts are summed over a discrete disc around each cell and
//! normalized by `tau` points per kernel cell. Cells that received few
//! points were seen by no camera and are likely occluded.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    /// Points per kernel cell at which a cell counts as fully observed.
    pub tau: f64,
    /// Disc radius in cells.
    pub kernel_radius: usize,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self { tau: 4.0, kernel_radius: 1 }
    }
}

impl OcclusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("occlusion tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMap {
    /// `nx x ny` probabilities in `[0, 1]`.
    pub p_occluded: Array2<f64>,
    pub tau: f64,
    pub kernel_radius: usize,
}

impl OcclusionMap {
    pub fn visibility(&self) -> Array2<f64> {
        self.p_occluded.mapv(|p| 1.0 - p)
    }
}

/// Grid offsets `(dx, dy)` with `dx² + dy² <= radius²`.
pub fn disc_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dx in -r..=r {
        for dy in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

pub fn occlusion_map(counts: ArrayView2<'_, u32>, cfg: &OcclusionConfig) -> Result<OcclusionMap> {
    cfg.validate()?;
    let (nx, ny) = counts.dim();
    let offsets = disc_offsets(cfg.kernel_radius);
    let norm = cfg.tau * offsets.len() as f64;
    let mut p = Array2::zeros((nx, ny));
    Zip::indexed(&mut p).par_for_each(|(i, j), out| {
        let mut local = 0u64;
        for &(dx, dy) in &offsets {
            let (x, y) = (i as isize + dx, j as isize + dy);
            if x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny {
                local += u64::from(counts[(x as usize, y as usize)]);
            }
        }
        *out = 1.0 - (local as f64 / norm).min(1.0);
    });
    Ok(OcclusionMap {
        p_occluded: p,
        tau: cfg.tau,
        kernel_radius: cfg.kernel_radius,
    })
}

/// `1 - p(o)` elementwise.
pub fn occupancy(p_occluded: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if let Some(bad) = p_occluded.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::domain(format!("occlusion probability {bad} outside [0, 1]")));
    }
    Ok(p_occluded.mapv(|p| 1.0 - p))
}
