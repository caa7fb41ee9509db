//! Synthetic driving scenes with exact geometry.
//!
//! A scene is a flat ground plane carrying a road polygon with painted lane
//! stripes, box-shaped vehicles standing on the road and thin vertical walls
//! beside it. Everything is a pure function of the grid, the seed and the
//! generation parameters.

mod render;

pub use render::{
    gt_depth_distribution, gt_occlusion, render_view, render_views, trace, DepthTarget, GtOcclusion, Hit,
    RenderedView, Surface, SurfaceKind,
};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SemanticClass;
use crate::pool::GridSpec;

/// Height of every vehicle box, meters.
pub const VEHICLE_HEIGHT: f64 = 1.5;

/// A box-shaped vehicle standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub center: [f64; 2],
    /// Heading of the long axis from +x, radians.
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
}

impl Vehicle {
    /// Point in the vehicle's local frame, long axis along x.
    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.to_local(x, y);
        // Grid-aligned faces sit exactly on cell centers; the slack keeps
        // them inside despite rotation round-off.
        const SLACK: f64 = 1e-9;
        lx.abs() <= 0.5 * self.length + SLACK && ly.abs() <= 0.5 * self.width + SLACK
    }

    fn radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }
}

/// Vertical wall of zero thickness standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub height: f64,
}

/// A painted stripe running along x at a fixed lateral offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stripe {
    pub y_center: f64,
    pub width: f64,
    /// `(on, off)` lengths in meters for dashed stripes; solid when `None`.
    pub dash: Option<(f64, f64)>,
    /// Offset of the dash pattern along x.
    pub phase: f64,
}

impl Stripe {
    fn contains(&self, x: f64, y: f64) -> bool {
        if (y - self.y_center).abs() > 0.5 * self.width {
            return false;
        }
        match self.dash {
            None => true,
            Some((on, off)) => (x - self.phase).rem_euclid(on + off) < on,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    /// Road boundary polygon in the ground plane, vertices in order.
    pub road: Vec<[f64; 2]>,
    /// Lane stripes are painted every `lane_width` meters across the road.
    pub lane_width: f64,
    pub marking_width: f64,
    /// `(on, off)` dash lengths, or `None` for solid stripes.
    pub dash: Option<(f64, f64)>,
    pub vehicles: usize,
    pub vehicle_length: (f64, f64),
    pub vehicle_width: (f64, f64),
    /// Maximum deviation of vehicle headings from the road direction, radians.
    pub yaw_jitter: f64,
    pub walls: usize,
    pub wall_length: (f64, f64),
    pub wall_height: (f64, f64),
    /// Half-sizes of the box around the ego origin kept free of objects.
    pub keep_clear: (f64, f64),
    /// Minimum spacing between vehicle bounding circles, meters.
    pub min_gap: f64,
    /// Snap vehicle poses to the grid: headings to quarter turns, sizes to
    /// even cell counts and centers to cell centers, which puts every box
    /// face on a row of cell centers.
    pub align_to_grid: bool,
    pub max_attempts: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            road: vec![[-1000.0, -7.0], [1000.0, -7.0], [1000.0, 7.0], [-1000.0, 7.0]],
            lane_width: 3.5,
            marking_width: 0.5,
            dash: None,
            vehicles: 6,
            vehicle_length: (4.0, 5.0),
            vehicle_width: (1.75, 2.0),
            yaw_jitter: 0.15,
            walls: 2,
            wall_length: (3.0, 8.0),
            wall_height: (1.5, 3.0),
            keep_clear: (4.0, 2.0),
            min_gap: 0.5,
            align_to_grid: false,
            max_attempts: 200,
        }
    }
}

impl SceneParams {
    /// Road, markings and background only.
    pub fn empty() -> Self {
        Self {
            vehicles: 0,
            walls: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.road.len() < 3 {
            return Err(Error::config("road polygon needs at least 3 vertices"));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lane_width", self.lane_width)?;
        positive("marking_width", self.marking_width)?;
        for (name, (lo, hi)) in [
            ("vehicle_length", self.vehicle_length),
            ("vehicle_width", self.vehicle_width),
            ("wall_length", self.wall_length),
            ("wall_height", self.wall_height),
        ] {
            positive(name, lo)?;
            if !(hi >= lo && hi.is_finite()) {
                return Err(Error::config(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        if let Some((on, off)) = self.dash {
            positive("dash on-length", on)?;
            positive("dash off-length", off)?;
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub extent: GridSpec,
    /// `nx x ny` class ids sampled at cell centers.
    pub semantic: Array2<u8>,
    pub road: Vec<[f64; 2]>,
    pub stripes: Vec<Stripe>,
    pub vehicles: Vec<Vehicle>,
    pub walls: Vec<Wall>,
    pub seed: u64,
}

impl Scene {
    /// Builds a scene from explicit objects and rasterizes its labels.
    pub fn from_parts(
        extent: GridSpec,
        road: Vec<[f64; 2]>,
        stripes: Vec<Stripe>,
        vehicles: Vec<Vehicle>,
        walls: Vec<Wall>,
        seed: u64,
    ) -> Self {
        let mut scene = Self {
            extent,
            semantic: Array2::zeros(extent.shape()),
            road,
            stripes,
            vehicles,
            walls,
            seed,
        };
        let (nx, ny) = extent.shape();
        scene.semantic = Array2::from_shape_fn((nx, ny), |(i, j)| {
            let (x, y) = extent.cell_center(i, j);
            scene.class_at(x, y).id()
        });
        scene
    }

    pub fn on_road(&self, x: f64, y: f64) -> bool {
        point_in_polygon(&self.road, x, y)
    }

    /// Class of the ground surface, ignoring vehicles.
    pub fn ground_class(&self, x: f64, y: f64) -> SemanticClass {
        if !self.on_road(x, y) {
            SemanticClass::Background
        } else if self.stripes.iter().any(|s| s.contains(x, y)) {
            SemanticClass::Marking
        } else {
            SemanticClass::Street
        }
    }

    /// Class seen from above at a ground-plane point.
    pub fn class_at(&self, x: f64, y: f64) -> SemanticClass {
        if self.vehicles.iter().any(|v| v.contains(x, y)) {
            SemanticClass::Vehicle
        } else {
            self.ground_class(x, y)
        }
    }

    pub fn vehicle_at(&self, x: f64, y: f64) -> Option<usize> {
        self.vehicles.iter().position(|v| v.contains(x, y))
    }
}

/// Even-odd rule.
fn point_in_polygon(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = (poly[i][0], poly[i][1]);
        let (xj, yj) = (poly[j][0], poly[j][1]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn lateral_range(poly: &[[f64; 2]]) -> (f64, f64) {
    poly.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])))
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generates a scene. The same `(spec, seed, params)` always gives the same
/// scene.
pub fn make_scene(spec: &GridSpec, seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (y_lo, y_hi) = lateral_range(&params.road);
    let mut stripes = Vec::new();
    let mut y = y_lo + params.lane_width;
    while y < y_hi - 0.5 * params.lane_width {
        stripes.push(Stripe {
            y_center: y,
            width: params.marking_width,
            dash: params.dash,
            phase: params.dash.map_or(0.0, |(on, off)| rng.random_range(0.0..on + off)),
        });
        y += params.lane_width;
    }
    let road = params.road.clone();
    let probe = Scene::from_parts(*spec, road.clone(), Vec::new(), Vec::new(), Vec::new(), seed);

    let in_keep_clear = |x: f64, y: f64, margin: f64| {
        x.abs() < params.keep_clear.0 + margin && y.abs() < params.keep_clear.1 + margin
    };
    let cell = spec.cell();
    let snap = |v: f64, step: f64| (v / step).round() * step;

    let mut vehicles: Vec<Vehicle> = Vec::with_capacity(params.vehicles);
    for n in 0..params.vehicles {
        let mut placed = false;
        for _ in 0..params.max_attempts {
            let mut v = Vehicle {
                center: [
                    rng.random_range(spec.x_min() + 3.0..spec.x_max() - 3.0),
                    rng.random_range(y_lo.max(spec.y_min())..y_hi.min(spec.y_max())),
                ],
                yaw: if rng.random_bool(0.5) { 0.0 } else { std::f64::consts::PI }
                    + rng.random_range(-1.0..=1.0) * params.yaw_jitter,
                length: uniform(&mut rng, params.vehicle_length),
                width: uniform(&mut rng, params.vehicle_width),
            };
            if params.align_to_grid {
                v.yaw = snap(v.yaw, std::f64::consts::FRAC_PI_2);
                v.length = snap(v.length, 2.0 * cell).max(2.0 * cell);
                v.width = snap(v.width, 2.0 * cell).max(2.0 * cell);
                v.center = [
                    spec.x_min() + snap(v.center[0] - spec.x_min() - 0.5 * cell, cell) + 0.5 * cell,
                    spec.y_min() + snap(v.center[1] - spec.y_min() - 0.5 * cell, cell) + 0.5 * cell,
                ];
            }
            let r = v.radius();
            let corners_on_road = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)].iter().all(|&(a, b)| {
                let (s, c) = v.yaw.sin_cos();
                let (lx, ly) = (a * 0.5 * v.length, b * 0.5 * v.width);
                probe.on_road(v.center[0] + c * lx - s * ly, v.center[1] + s * lx + c * ly)
            });
            let clear = !in_keep_clear(v.center[0], v.center[1], r)
                && vehicles.iter().all(|o| {
                    let d = (o.center[0] - v.center[0]).hypot(o.center[1] - v.center[1]);
                    d > o.radius() + r + params.min_gap
                });
            if corners_on_road && clear {
                vehicles.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place vehicle {} of {} after {} attempts",
                n + 1,
                params.vehicles,
                params.max_attempts
            )));
        }
    }

    let mut walls: Vec<Wall> = Vec::with_capacity(params.walls);
    for n in 0..params.walls {
        let mut placed = false;
        for _ in 0..params.max_attempts {
            let mid = [
                rng.random_range(spec.x_min()..spec.x_max()),
                rng.random_range(spec.y_min()..spec.y_max()),
            ];
            let len = uniform(&mut rng, params.wall_length);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (s, c) = angle.sin_cos();
            let wall = Wall {
                a: [mid[0] - 0.5 * len * c, mid[1] - 0.5 * len * s],
                b: [mid[0] + 0.5 * len * c, mid[1] + 0.5 * len * s],
                height: uniform(&mut rng, params.wall_height),
            };
            let samples = 8;
            let ok = (0..=samples).all(|k| {
                let t = k as f64 / samples as f64;
                let x = wall.a[0] + t * (wall.b[0] - wall.a[0]);
                let y = wall.a[1] + t * (wall.b[1] - wall.a[1]);
                !probe.on_road(x, y) && !in_keep_clear(x, y, 1.0)
            });
            if ok {
                walls.push(wall);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place wall {} of {} after {} attempts",
                n + 1,
                params.walls,
                params.max_attempts
            )));
        }
    }

    Ok(Scene::from_parts(*spec, road, stripes, vehicles, walls, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::square(15.0, 0.25).unwrap()
    }

    #[test]
    fn empty_scene_has_only_ground_classes() {
        let s = make_scene(&grid(), 1, &SceneParams::empty()).unwrap();
        assert!(s.vehicles.is_empty() && s.walls.is_empty());
        let mut seen = [false; 5];
        for &c in s.semantic.iter() {
            seen[c as usize] = true;
        }
        assert_eq!(seen, [false, false, true, true, true]);
    }

    #[test]
    fn generation_is_deterministic() {
        let p = SceneParams::default();
        let a = make_scene(&grid(), 42, &p).unwrap();
        let b = make_scene(&grid(), 42, &p).unwrap();
        assert_eq!(a, b);
        let c = make_scene(&grid(), 43, &p).unwrap();
        assert_ne!(a.vehicles, c.vehicles);
    }

    #[test]
    fn footprint_rasterization_matches_oracle() {
        let g = grid();
        let v = Vehicle { center: [6.1, -2.3], yaw: 0.4, length: 4.4, width: 1.8 };
        let s = Scene::from_parts(g, SceneParams::default().road, Vec::new(), vec![v], Vec::new(), 0);
        let (s0, c0) = (0.4f64).sin_cos();
        for ((i, j), &cls) in s.semantic.indexed_iter() {
            let (x, y) = g.cell_center(i, j);
            let (dx, dy) = (x - 6.1, y + 2.3);
            let inside = (c0 * dx + s0 * dy).abs() <= 2.2 && (-s0 * dx + c0 * dy).abs() <= 0.9;
            assert_eq!(cls == SemanticClass::Vehicle.id(), inside, "cell ({i}, {j})");
        }
    }

    #[test]
    fn objects_respect_constraints() {
        let p = SceneParams { vehicles: 8, walls: 4, ..SceneParams::default() };
        let s = make_scene(&grid(), 7, &p).unwrap();
        assert_eq!(s.vehicles.len(), 8);
        for v in &s.vehicles {
            assert!(s.on_road(v.center[0], v.center[1]));
            assert!(!(v.center[0].abs() < 4.0 && v.center[1].abs() < 2.0));
        }
        for w in &s.walls {
            assert!(!s.on_road(w.a[0], w.a[1]) && !s.on_road(w.b[0], w.b[1]));
        }
    }

    #[test]
    fn impossible_placement_fails() {
        let p = SceneParams { vehicles: 500, max_attempts: 5, ..SceneParams::default() };
        assert!(matches!(make_scene(&grid(), 1, &p), Err(Error::Generation(_))));
    }

    #[test]
    fn aligned_vehicle_faces_cross_cell_centers() {
        let p = SceneParams { align_to_grid: true, ..SceneParams::default() };
        let s = make_scene(&grid(), 3, &p).unwrap();
        for v in &s.vehicles {
            let cells = s.semantic.indexed_iter().filter(|&((i, j), _)| {
                let (x, y) = s.extent.cell_center(i, j);
                v.contains(x, y)
            });
            let expected = ((v.length / 0.25).round() + 1.0) * ((v.width / 0.25).round() + 1.0);
            assert_eq!(cells.count() as f64, expected);
        }
    }
}
