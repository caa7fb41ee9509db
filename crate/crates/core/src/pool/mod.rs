//! BEV rasterization of lifted points and multi-camera pooling.
//!
//! Splatting is deterministic: points are ordered by
//! `(cell, camera, pixel, bin)` before any floating-point accumulation, and
//! parallel workers only ever own whole cells, so the bytes of the result do
//! not depend on the input order or on the number of threads.

mod strategy;

pub use strategy::{
    camera_means, pool, pool_backward, pool_intrinsic_embed, pool_max, pool_mean, pool_per_cell,
    pool_sum, pool_weighted_sum, IntrinsicEmbed, PoolGrads, PoolParams, PoolStrategy, Pooler,
};

use ndarray::{s, Array2, Array3, Array4, ArrayView4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lift::LiftedPoints;

/// Metric extent and resolution of the BEV raster. Cell `(i, j)` covers
/// `[x_min + i·cell, x_min + (i+1)·cell) x [y_min + j·cell, y_min + (j+1)·cell)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecFields", into = "GridSpecFields")]
pub struct GridSpec {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    cell: f64,
    nx: usize,
    ny: usize,
}

#[derive(Serialize, Deserialize)]
struct GridSpecFields {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    cell: f64,
}

impl TryFrom<GridSpecFields> for GridSpec {
    type Error = Error;

    fn try_from(f: GridSpecFields) -> Result<Self> {
        GridSpec::new(f.x_min, f.x_max, f.y_min, f.y_max, f.cell)
    }
}

impl From<GridSpec> for GridSpecFields {
    fn from(g: GridSpec) -> Self {
        Self {
            x_min: g.x_min,
            x_max: g.x_max,
            y_min: g.y_min,
            y_max: g.y_max,
            cell: g.cell,
        }
    }
}

impl Default for GridSpec {
    /// 200 x 200 cells of 0.25 m covering ±25 m around the ego vehicle.
    fn default() -> Self {
        Self::new(-25.0, 25.0, -25.0, 25.0, 0.25).expect("default grid is valid")
    }
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::config(format!("cell size must be > 0, got {cell}")));
        }
        let count = |lo: f64, hi: f64, axis: &str| -> Result<usize> {
            let n = (hi - lo) / cell;
            let rounded = n.round();
            if !(rounded >= 1.0) || (n - rounded).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "{axis} extent [{lo}, {hi}) is not a whole number of {cell} m cells"
                )));
            }
            Ok(rounded as usize)
        };
        let nx = count(x_min, x_max, "x")?;
        let ny = count(y_min, y_max, "y")?;
        if !(x_min <= 0.0 && 0.0 < x_max && y_min <= 0.0 && 0.0 < y_max) {
            return Err(Error::config("grid extent must contain the ego origin"));
        }
        Ok(Self { x_min, x_max, y_min, y_max, cell, nx, ny })
    }

    /// Square grid of `half_extent` meters on each side of the origin.
    pub fn square(half_extent: f64, cell: f64) -> Result<Self> {
        Self::new(-half_extent, half_extent, -half_extent, half_extent, cell)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn cell(&self) -> f64 {
        self.cell
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.x_min) / self.cell).floor();
        let fj = ((y - self.y_min) / self.cell).floor();
        if fi < 0.0 || fj < 0.0 || fi >= self.nx as f64 || fj >= self.ny as f64 {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_min + (i as f64 + 0.5) * self.cell,
            self.y_min + (j as f64 + 0.5) * self.cell,
        )
    }
}

/// Per-cell reduction used while splatting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    Sum,
    Max,
    Mean,
}

/// A single `C x nx x ny` BEV raster with per-cell point counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub features: Array3<f64>,
    pub counts: Array2<u32>,
}

/// Splat output before merging: one raster per camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraGrids {
    /// `K x C x nx x ny`
    pub features: Array4<f64>,
    /// `K x nx x ny`
    pub counts: Array3<u32>,
    /// Points that fell outside the grid extent.
    pub dropped: usize,
}

impl CameraGrids {
    pub fn cameras(&self) -> usize {
        self.features.dim().0
    }

    pub fn channels(&self) -> usize {
        self.features.dim().1
    }

    pub fn camera(&self, k: usize) -> BevGrid {
        BevGrid {
            features: self.features.slice(s![k, .., .., ..]).to_owned(),
            counts: self.counts.slice(s![k, .., ..]).to_owned(),
        }
    }

    /// Total points per cell over all cameras.
    pub fn merged_counts(&self) -> Array2<u32> {
        self.counts.sum_axis(ndarray::Axis(0))
    }

    /// Number of cameras with at least one point in each cell.
    pub fn cameras_per_cell(&self) -> Array2<u32> {
        self.counts.map(|&c| u32::from(c > 0)).sum_axis(ndarray::Axis(0))
    }
}

/// Retained forward state of a splat, needed to route gradients back to the
/// lifted points.
#[derive(Debug, Clone)]
pub struct SplatTape {
    reduce: Reduce,
    shape: (usize, usize, usize, usize),
    /// Flat `(camera, i, j)` target of each input point, if inside the grid.
    target: Vec<Option<usize>>,
    counts: Array3<u32>,
    /// For max: winning point per `(camera, channel, i, j)`.
    argmax: Option<Array4<u32>>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct SortKey {
    cell: u32,
    camera: u32,
    pixel: u32,
    bin: u32,
    index: u32,
}

struct CellResult {
    camera: usize,
    cell: usize,
    values: Vec<f64>,
    count: u32,
    winners: Vec<u32>,
}

/// Scatters lifted points into per-camera BEV rasters.
pub fn splat(points: &LiftedPoints, spec: &GridSpec, cameras: usize, reduce: Reduce) -> Result<CameraGrids> {
    splat_with_tape(points, spec, cameras, reduce).map(|(g, _)| g)
}

/// As [`splat`], also returning the state needed by [`SplatTape::backward`].
pub fn splat_with_tape(
    points: &LiftedPoints,
    spec: &GridSpec,
    cameras: usize,
    reduce: Reduce,
) -> Result<(CameraGrids, SplatTape)> {
    let n = points.len();
    let channels = points.channels();
    if n > u32::MAX as usize {
        return Err(Error::Data("too many points for 32-bit indices".into()));
    }
    if points.features.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN feature in lifted points".into()));
    }
    if let Some(k) = points.camera_id.iter().find(|&&k| k as usize >= cameras) {
        return Err(Error::Data(format!("camera id {k} >= camera count {cameras}")));
    }
    let (nx, ny) = spec.shape();
    let cells = nx * ny;

    let mut target = vec![None; n];
    let mut keys = Vec::with_capacity(n);
    for (idx, p) in points.positions.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::Data(format!("non-finite position for point {idx}")));
        }
        if let Some((i, j)) = spec.cell_of(p[0], p[1]) {
            let cell = i * ny + j;
            let camera = points.camera_id[idx];
            target[idx] = Some(camera as usize * cells + cell);
            keys.push(SortKey {
                cell: cell as u32,
                camera,
                pixel: points.pixel_id[idx],
                bin: points.bin_id[idx],
                index: idx as u32,
            });
        }
    }
    let dropped = n - keys.len();
    keys.par_sort_unstable();

    // Runs of identical (cell, camera); each run is reduced by one worker.
    let mut runs = Vec::new();
    let mut start = 0;
    for k in 1..=keys.len() {
        if k == keys.len() || (keys[k].cell, keys[k].camera) != (keys[start].cell, keys[start].camera) {
            runs.push(start..k);
            start = k;
        }
    }

    let features = &points.features;
    let results: Vec<CellResult> = runs
        .into_par_iter()
        .map(|run| {
            let run = &keys[run];
            let first = run[0];
            let mut values = vec![0.0; channels];
            let mut winners = Vec::new();
            match reduce {
                Reduce::Sum | Reduce::Mean => {
                    for key in run {
                        let row = features.row(key.index as usize);
                        for (v, x) in values.iter_mut().zip(row.iter()) {
                            *v += *x;
                        }
                    }
                    if reduce == Reduce::Mean {
                        let c = run.len() as f64;
                        for v in &mut values {
                            *v /= c;
                        }
                    }
                }
                Reduce::Max => {
                    winners = vec![first.index; channels];
                    let row = features.row(first.index as usize);
                    for (v, x) in values.iter_mut().zip(row.iter()) {
                        *v = *x;
                    }
                    for key in &run[1..] {
                        let row = features.row(key.index as usize);
                        for c in 0..channels {
                            if row[c] > values[c] {
                                values[c] = row[c];
                                winners[c] = key.index;
                            }
                        }
                    }
                }
            }
            CellResult {
                camera: first.camera as usize,
                cell: first.cell as usize,
                values,
                count: run.len() as u32,
                winners,
            }
        })
        .collect();

    let mut out = Array4::zeros((cameras, channels, nx, ny));
    let mut counts = Array3::zeros((cameras, nx, ny));
    let mut argmax = (reduce == Reduce::Max).then(|| Array4::from_elem((cameras, channels, nx, ny), u32::MAX));
    for r in results {
        let (i, j) = (r.cell / ny, r.cell % ny);
        counts[(r.camera, i, j)] = r.count;
        for c in 0..channels {
            out[(r.camera, c, i, j)] = r.values[c];
        }
        if let Some(am) = argmax.as_mut() {
            for c in 0..channels {
                am[(r.camera, c, i, j)] = r.winners[c];
            }
        }
    }
    let tape = SplatTape {
        reduce,
        shape: (cameras, channels, nx, ny),
        target,
        counts: counts.clone(),
        argmax,
    };
    Ok((
        CameraGrids {
            features: out,
            counts,
            dropped,
        },
        tape,
    ))
}

impl SplatTape {
    /// Gradient of a scalar loss with respect to every lifted point feature,
    /// given its gradient with respect to the `K x C x nx x ny` splat output.
    /// Max routes each cell's gradient to its first maximal point.
    pub fn backward(&self, upstream: ArrayView4<'_, f64>) -> Result<Array2<f64>> {
        if upstream.dim() != self.shape {
            return Err(Error::shape(format!(
                "upstream gradient {:?} does not match splat output {:?}",
                upstream.dim(),
                self.shape
            )));
        }
        let (_, channels, nx, ny) = self.shape;
        let cells = nx * ny;
        let mut grad = Array2::zeros((self.target.len(), channels));
        for (idx, t) in self.target.iter().enumerate() {
            let Some(t) = *t else { continue };
            let (k, cell) = (t / cells, t % cells);
            let (i, j) = (cell / ny, cell % ny);
            for c in 0..channels {
                let g = upstream[(k, c, i, j)];
                grad[(idx, c)] = match self.reduce {
                    Reduce::Sum => g,
                    Reduce::Mean => g / f64::from(self.counts[(k, i, j)]),
                    Reduce::Max => {
                        let am = self.argmax.as_ref().expect("max tape keeps argmax");
                        if am[(k, c, i, j)] as usize == idx {
                            g
                        } else {
                            0.0
                        }
                    }
                };
            }
        }
        Ok(grad)
    }
}
