//! Ray casting against scene primitives, per-camera label renders and
//! ground-truth visibility.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rayon::prelude::*;

use super::{Scene, VEHICLE_HEIGHT};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::lift::{build_ray_grid, DepthBins, RayGrid};
use crate::metrics::SemanticClass;

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Surface {
    Ground,
    Vehicle(usize),
    Wall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Distance along the unit ray.
    pub t: f64,
    pub point: Vector3<f64>,
    pub surface: Surface,
}

/// Nearest intersection of the ray `origin + t·dir` (`dir` unit length,
/// vehicle frame) with the ground, any vehicle box or any wall.
pub fn trace(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<(f64, Surface)> = None;
    let mut consider = |t: f64, s: Surface| {
        if t > HIT_EPS && best.is_none_or(|(b, _)| t < b) {
            best = Some((t, s));
        }
    };
    if dir.z < 0.0 {
        consider(-origin.z / dir.z, Surface::Ground);
    }
    for (k, v) in scene.vehicles.iter().enumerate() {
        if let Some(t) = box_entry(v, origin, dir) {
            consider(t, Surface::Vehicle(k));
        }
    }
    for (k, w) in scene.walls.iter().enumerate() {
        if let Some(t) = wall_hit(w, origin, dir) {
            consider(t, Surface::Wall(k));
        }
    }
    best.map(|(t, surface)| Hit {
        t,
        point: origin + dir * t,
        surface,
    })
}

fn box_entry(v: &super::Vehicle, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let (s, c) = v.yaw.sin_cos();
    let (ox, oy) = v.to_local(o.x, o.y);
    let (dx, dy) = (c * d.x + s * d.y, -s * d.x + c * d.y);
    let slabs = [
        (ox, dx, 0.5 * v.length),
        (oy, dy, 0.5 * v.width),
        (o.z - 0.5 * VEHICLE_HEIGHT, d.z, 0.5 * VEHICLE_HEIGHT),
    ];
    let (mut enter, mut exit) = (f64::NEG_INFINITY, f64::INFINITY);
    for (p, q, half) in slabs {
        if q.abs() < 1e-15 {
            if p.abs() > half {
                return None;
            }
            continue;
        }
        let (a, b) = ((-half - p) / q, (half - p) / q);
        enter = enter.max(a.min(b));
        exit = exit.min(a.max(b));
    }
    (enter <= exit && enter > 0.0).then_some(enter)
}

fn wall_hit(w: &super::Wall, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let (ex, ey) = (w.b[0] - w.a[0], w.b[1] - w.a[1]);
    let len2 = ex * ex + ey * ey;
    if len2 == 0.0 {
        return None;
    }
    let (nx, ny) = (-ey, ex);
    let denom = d.x * nx + d.y * ny;
    if denom.abs() < 1e-15 {
        return None;
    }
    let t = ((w.a[0] - o.x) * nx + (w.a[1] - o.y) * ny) / denom;
    let p = o + d * t;
    let s = ((p.x - w.a[0]) * ex + (p.y - w.a[1]) * ey) / len2;
    ((0.0..=1.0).contains(&s) && (0.0..=w.height).contains(&p.z)).then_some(t)
}

/// What a render pixel landed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(u8)]
pub enum SurfaceKind {
    #[default]
    None = 0,
    Ground = 1,
    Vehicle = 2,
    Wall = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    /// Class id per pixel; walls render as background, misses as invalid.
    pub semantic: Array2<u8>,
    /// Range along the viewing ray in meters, `+inf` on a miss.
    pub depth: Array2<f64>,
    pub surface: Array2<SurfaceKind>,
    pub camera: usize,
}

impl RenderedView {
    /// `H x W x 5` one-hot encoding of the semantic image.
    pub fn one_hot(&self) -> Array3<f64> {
        let (h, w) = self.semantic.dim();
        let mut out = Array3::zeros((h, w, crate::metrics::NUM_CLASSES));
        for ((i, j), &c) in self.semantic.indexed_iter() {
            out[(i, j, c as usize)] = 1.0;
        }
        out
    }
}

fn check_camera(camera: &Camera) -> Result<()> {
    let z = camera.extrinsics.translation().z;
    if !(z > 0.0) {
        return Err(Error::config(format!("camera '{}' is not above the ground (z = {z})", camera.name)));
    }
    Ok(())
}

/// Casts one ray per cell of `rays` from `camera` into the scene.
pub fn render_view(scene: &Scene, camera: &Camera, rays: &RayGrid, index: usize) -> Result<RenderedView> {
    check_camera(camera)?;
    let (h, w) = (rays.height(), rays.width());
    let origin = *camera.extrinsics.translation();
    let rows: Vec<Vec<(u8, f64, SurfaceKind)>> = (0..h)
        .into_par_iter()
        .map(|i| {
            (0..w)
                .map(|j| {
                    if !rays.is_valid(i, j) {
                        return (SemanticClass::Invalid.id(), f64::INFINITY, SurfaceKind::None);
                    }
                    let dir = camera.extrinsics.direction_to_vehicle(rays.dir(i, j));
                    match trace(scene, &origin, &dir) {
                        None => (SemanticClass::Invalid.id(), f64::INFINITY, SurfaceKind::None),
                        Some(hit) => match hit.surface {
                            Surface::Ground => (
                                scene.ground_class(hit.point.x, hit.point.y).id(),
                                hit.t,
                                SurfaceKind::Ground,
                            ),
                            Surface::Vehicle(_) => (SemanticClass::Vehicle.id(), hit.t, SurfaceKind::Vehicle),
                            Surface::Wall(_) => (SemanticClass::Background.id(), hit.t, SurfaceKind::Wall),
                        },
                    }
                })
                .collect()
        })
        .collect();
    let mut view = RenderedView {
        semantic: Array2::zeros((h, w)),
        depth: Array2::zeros((h, w)),
        surface: Array2::default((h, w)),
        camera: index,
    };
    for (i, row) in rows.into_iter().enumerate() {
        for (j, (c, d, s)) in row.into_iter().enumerate() {
            view.semantic[(i, j)] = c;
            view.depth[(i, j)] = d;
            view.surface[(i, j)] = s;
        }
    }
    Ok(view)
}

/// Renders every camera at `feature_size` (use the image size for a
/// full-resolution render).
pub fn render_views(scene: &Scene, cameras: &[Camera], feature_size: (usize, usize)) -> Result<Vec<RenderedView>> {
    cameras
        .iter()
        .enumerate()
        .map(|(k, cam)| {
            let rays = build_ray_grid(&cam.intrinsics, feature_size)?;
            render_view(scene, cam, &rays, k)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtOcclusion {
    /// Fraction of each cell's sub-points seen by at least one camera.
    pub visibility: Array2<f64>,
    /// 1 where visibility is below one half, else 0.
    pub occluded: Array2<f64>,
}

impl GtOcclusion {
    /// `1 - visibility`.
    pub fn p_occluded(&self) -> Array2<f64> {
        self.visibility.mapv(|v| 1.0 - v)
    }
}

fn sees(scene: &Scene, cam: &Camera, target: &Vector3<f64>, vehicle: Option<usize>) -> bool {
    if cam.project_point(target).is_none() {
        return false;
    }
    let origin = cam.extrinsics.translation();
    let delta = target - origin;
    let dist = delta.norm();
    if dist == 0.0 {
        return true;
    }
    let dir = delta / dist;
    match (trace(scene, origin, &dir), vehicle) {
        (Some(hit), Some(k)) => hit.surface == Surface::Vehicle(k),
        (Some(hit), None) => hit.surface == Surface::Ground && (hit.t - dist).abs() <= 1e-6 * dist.max(1.0),
        (None, _) => false,
    }
}

/// Ground-truth visibility on the scene grid from `sub x sub` samples per
/// cell. Ground samples need a clear line of sight; samples inside a vehicle
/// footprint are taken on its roof and count as seen when the sight line
/// first meets that vehicle. A vehicle with any seen sample has its whole
/// footprint marked visible.
pub fn gt_occlusion(scene: &Scene, cameras: &[Camera], sub: usize) -> Result<GtOcclusion> {
    for cam in cameras {
        check_camera(cam)?;
    }
    if sub == 0 {
        return Err(Error::config("sub-sampling must be at least 1"));
    }
    let spec = scene.extent;
    let (nx, ny) = spec.shape();
    let nveh = scene.vehicles.len();
    let step = spec.cell() / sub as f64;
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..nx)
        .into_par_iter()
        .map(|i| {
            let mut vis = vec![0.0; ny];
            let mut seen = vec![false; nveh];
            for (j, v) in vis.iter_mut().enumerate() {
                let x0 = spec.x_min() + i as f64 * spec.cell();
                let y0 = spec.y_min() + j as f64 * spec.cell();
                let mut count = 0usize;
                for a in 0..sub {
                    for b in 0..sub {
                        let x = x0 + (a as f64 + 0.5) * step;
                        let y = y0 + (b as f64 + 0.5) * step;
                        let vehicle = scene.vehicle_at(x, y);
                        let z = if vehicle.is_some() { VEHICLE_HEIGHT } else { 0.0 };
                        let target = Vector3::new(x, y, z);
                        if cameras.iter().any(|c| sees(scene, c, &target, vehicle)) {
                            count += 1;
                            if let Some(k) = vehicle {
                                seen[k] = true;
                            }
                        }
                    }
                }
                *v = count as f64 / (sub * sub) as f64;
            }
            (vis, seen)
        })
        .collect();
    let mut visibility = Array2::zeros((nx, ny));
    let mut seen = vec![false; nveh];
    for (i, (row, s)) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            visibility[(i, j)] = v;
        }
        for (acc, x) in seen.iter_mut().zip(s) {
            *acc |= x;
        }
    }
    for ((i, j), v) in visibility.indexed_iter_mut() {
        let (x, y) = spec.cell_center(i, j);
        if scene.vehicle_at(x, y).is_some_and(|k| seen[k]) {
            *v = 1.0;
        }
    }
    let occluded = visibility.mapv(|v| if v < 0.5 { 1.0 } else { 0.0 });
    Ok(GtOcclusion { visibility, occluded })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthTarget {
    /// Bin holding each pixel's true depth; `None` on misses.
    pub bin: Array2<Option<usize>>,
    /// Pixels whose depth fell outside the bin range and was clamped.
    pub clamped: Array2<bool>,
    pub bins: usize,
}

impl DepthTarget {
    /// `H x W x D` one-hot distributions, all zero on misses.
    pub fn dist(&self) -> Array3<f64> {
        let (h, w) = self.bin.dim();
        let mut out = Array3::zeros((h, w, self.bins));
        for ((i, j), b) in self.bin.indexed_iter() {
            if let Some(k) = b {
                out[(i, j, *k)] = 1.0;
            }
        }
        out
    }

    /// Drops clamped pixels.
    pub fn without_clamped(mut self) -> Self {
        ndarray::Zip::from(&mut self.bin).and(&self.clamped).for_each(|b, &c| {
            if c {
                *b = None;
            }
        });
        self
    }
}

/// One-hot depth distribution at the bin holding each pixel's true depth.
pub fn gt_depth_distribution(view: &RenderedView, bins: &DepthBins) -> DepthTarget {
    let (h, w) = view.depth.dim();
    let mut bin = Array2::from_elem((h, w), None);
    let mut clamped = Array2::from_elem((h, w), false);
    for ((i, j), &d) in view.depth.indexed_iter() {
        if let Some((k, c)) = bins.bin_of(d) {
            bin[(i, j)] = Some(k);
            clamped[(i, j)] = c;
        }
    }
    DepthTarget {
        bin,
        clamped,
        bins: bins.len(),
    }
}
