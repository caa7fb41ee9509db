//! Lift, splat, pool and decode, composed over a rendered scene.

use nalgebra::Vector3;
use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::camera::{
    cylindrical_rectify, Camera, CameraExtrinsics, CameraIntrinsics, CylinderConfig, DistortionModel, Projection,
    Sampling, DESCRIPTOR_LEN,
};
use crate::error::{Error, Result};
use crate::lift::{build_ray_grid, lift_one_hot, DepthBins, LiftedPoints, RayGrid};
use crate::metrics::{evaluate, EvalReport, NUM_CLASSES};
use crate::occlusion::{occlusion_map, OcclusionConfig, OcclusionMap};
use crate::pool::{pool, splat, CameraGrids, GridSpec, PoolParams, PoolStrategy, Reduce};
use crate::scenesim::{
    gt_depth_distribution, gt_occlusion, make_scene, render_view, GtOcclusion, RenderedView, Scene, SceneParams,
};

/// Angular coverage of the cylindrical resampling used instead of the
/// native fisheye rays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RectifyConfig {
    /// Horizontal field of view, radians.
    pub hfov: f64,
    /// Vertical field of view, radians.
    pub vfov: f64,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self { hfov: 3.0, vfov: 2.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub depth: DepthBins,
    /// Image pixels per feature cell along each axis.
    pub stride: usize,
    pub reduce: Reduce,
    pub strategy: PoolStrategy,
    pub occlusion: OcclusionConfig,
    /// Visibility samples per cell side for ground truth.
    pub subsamples: usize,
    /// Resample renders onto a cylinder before lifting.
    pub rectify: Option<RectifyConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            depth: DepthBins::default(),
            stride: 8,
            reduce: Reduce::Sum,
            strategy: PoolStrategy::Sum,
            occlusion: OcclusionConfig::default(),
            subsamples: 4,
            rectify: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::config("stride must be at least 1"));
        }
        if self.subsamples == 0 {
            return Err(Error::config("subsamples must be at least 1"));
        }
        self.occlusion.validate()?;
        if let Some(r) = &self.rectify {
            CylinderConfig::covering(1, 1, r.hfov, r.vfov)?;
        }
        Ok(())
    }

    /// Feature map size for an image of `width x height`.
    pub fn feature_size(&self, intr: &CameraIntrinsics) -> (usize, usize) {
        (intr.height / self.stride, intr.width / self.stride)
    }
}

/// Four cameras facing forward, left, backward and right from the corners of
/// a car-sized box, each pitched down and using a different lens model.
pub fn surround_rig(height: f64, pitch_down: f64, size: (usize, usize)) -> Result<Vec<Camera>> {
    let (w, h) = size;
    let f = 150.0 * w as f64 / 480.0;
    let lenses = [
        ("front", Projection::Eucm { alpha: 0.6, beta: 1.1 }, 0.0, (2.0, 0.0)),
        ("left", Projection::DoubleSphere { xi: -0.2, alpha: 0.6 }, 0.5, (0.0, 1.0)),
        ("rear", Projection::Ucm { xi: 0.9 }, 1.0, (-2.0, 0.0)),
        ("right", Projection::Polynomial { a: [f, 0.0, -3.0 * f / 150.0, 0.4 * f / 150.0] }, -0.5, (0.0, -1.0)),
    ];
    lenses
        .into_iter()
        .map(|(name, proj, turns, (x, y))| {
            let model = DistortionModel::with_default_range(proj, f)?;
            Ok(Camera {
                name: name.to_string(),
                intrinsics: CameraIntrinsics::new(model, w as f64 / 2.0, h as f64 / 2.0, w, h)?,
                extrinsics: CameraExtrinsics::looking(
                    turns * std::f64::consts::PI,
                    pitch_down,
                    Vector3::new(x, y, height),
                ),
            })
        })
        .collect()
}

/// Parameters of [`surround_rig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurroundRig {
    /// Mounting height, meters.
    pub height: f64,
    /// Downward pitch, radians.
    pub pitch_down: f64,
    pub image_width: usize,
    pub image_height: usize,
}

impl Default for SurroundRig {
    fn default() -> Self {
        Self {
            height: 4.0,
            pitch_down: 0.5,
            image_width: 480,
            image_height: 302,
        }
    }
}

impl SurroundRig {
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        surround_rig(self.height, self.pitch_down, (self.image_width, self.image_height))
    }
}

/// Scene generation, rig and pipeline settings of one synthetic run.
///
/// The defaults lift every pixel with its true depth at 5 cm resolution into
/// a ±12 m grid, over a scene whose vehicles are snapped to the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub rig: SurroundRig,
    pub scene: SceneParams,
    pub pipeline: PipelineConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            rig: SurroundRig::default(),
            scene: SceneParams {
                align_to_grid: true,
                ..SceneParams::default()
            },
            pipeline: PipelineConfig {
                grid: GridSpec::square(12.0, 0.25).expect("valid grid"),
                depth: DepthBins::new(0.2, 30.0, 0.05).expect("valid bins"),
                stride: 1,
                ..PipelineConfig::default()
            },
        }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.pipeline.validate()
    }

    /// Generates the scene for `seed` and runs it through the pipeline.
    pub fn run(&self, seed: u64) -> Result<(Scene, Vec<Camera>, SceneRun)> {
        self.validate()?;
        let cameras = self.rig.cameras()?;
        let scene = make_scene(&self.pipeline.grid, seed, &self.scene)?;
        let run = run_scene(&scene, &cameras, &self.pipeline)?;
        Ok((scene, cameras, run))
    }
}

/// `K x P` matrix of normalized intrinsic descriptors.
pub fn descriptors(cameras: &[Camera]) -> Array2<f64> {
    let mut out = Array2::zeros((cameras.len(), DESCRIPTOR_LEN));
    for (k, cam) in cameras.iter().enumerate() {
        for (p, v) in cam.intrinsics.descriptor().into_iter().enumerate() {
            out[(k, p)] = v;
        }
    }
    out
}

/// What one camera contributes to the lift.
#[derive(Debug, Clone)]
pub struct CameraInput {
    pub rays: RayGrid,
    /// `Hf x Wf x C` features.
    pub features: Array3<f64>,
    /// One-hot depth per feature cell as a bin index.
    pub depth: Array2<Option<usize>>,
}

/// Renders each camera's ground-truth one-hot semantics and depth at feature
/// resolution. Depths outside the bin range produce no points.
pub fn scene_inputs(scene: &Scene, cameras: &[Camera], cfg: &PipelineConfig) -> Result<Vec<CameraInput>> {
    cfg.validate()?;
    cameras
        .iter()
        .enumerate()
        .map(|(k, cam)| match &cfg.rectify {
            None => {
                let rays = build_ray_grid(&cam.intrinsics, cfg.feature_size(&cam.intrinsics))?;
                let view = render_view(scene, cam, &rays, k)?;
                Ok(CameraInput {
                    features: view.one_hot(),
                    depth: gt_depth_distribution(&view, &cfg.depth).without_clamped().bin,
                    rays,
                })
            }
            Some(r) => rectified_input(scene, cam, k, cfg, r),
        })
        .collect()
}

fn rectified_input(
    scene: &Scene,
    cam: &Camera,
    index: usize,
    cfg: &PipelineConfig,
    r: &RectifyConfig,
) -> Result<CameraInput> {
    let (h, w) = (cam.intrinsics.height, cam.intrinsics.width);
    let full = build_ray_grid(&cam.intrinsics, (h, w))?;
    let view = render_view(scene, cam, &full, index)?;
    let onehot = view.one_hot();
    let mut packed = Array3::zeros((h, w, NUM_CLASSES + 1));
    packed.slice_mut(ndarray::s![.., .., ..NUM_CLASSES]).assign(&onehot);
    packed.slice_mut(ndarray::s![.., .., NUM_CLASSES]).assign(&view.depth);
    let (hf, wf) = cfg.feature_size(&cam.intrinsics);
    let cyl = CylinderConfig::covering(wf, hf, r.hfov, r.vfov)?;
    let out = cylindrical_rectify(&cam.intrinsics, packed.view(), &cyl, Sampling::Nearest)?;
    let features = out.image.slice(ndarray::s![.., .., ..NUM_CLASSES]).to_owned();
    let mut depth = out.image.slice(ndarray::s![.., .., NUM_CLASSES]).to_owned();
    ndarray::Zip::from(&mut depth).and(&out.valid).for_each(|d, &ok| {
        if !ok {
            *d = f64::INFINITY;
        }
    });
    let resampled = RenderedView {
        semantic: Array2::zeros((hf, wf)),
        depth,
        surface: Array2::default((hf, wf)),
        camera: index,
    };
    Ok(CameraInput {
        rays: RayGrid::from_cylinder(&out.camera, (hf, wf))?,
        features,
        depth: gt_depth_distribution(&resampled, &cfg.depth).without_clamped().bin,
    })
}

/// Lifts every camera's input and splats the union into per-camera grids.
pub fn splat_inputs(inputs: &[CameraInput], cameras: &[Camera], cfg: &PipelineConfig) -> Result<CameraGrids> {
    if inputs.len() != cameras.len() {
        return Err(Error::shape(format!("{} inputs for {} cameras", inputs.len(), cameras.len())));
    }
    let parts = inputs
        .iter()
        .zip(cameras)
        .enumerate()
        .map(|(k, (input, cam))| {
            lift_one_hot(
                &input.rays,
                &cam.extrinsics,
                &cfg.depth,
                input.features.view(),
                input.depth.view(),
                k as u32,
            )
        })
        .collect::<Result<Vec<LiftedPoints>>>()?;
    let points = LiftedPoints::concat(&parts)?;
    splat(&points, &cfg.grid, cameras.len(), cfg.reduce)
}

/// Per-cell index of the largest channel; the lowest index wins ties, so
/// empty cells decode to class 0.
pub fn argmax_classes(pooled: ArrayView3<'_, f64>) -> Array2<u8> {
    pooled.map_axis(Axis(0), |lane| {
        let mut best = 0;
        for (k, &v) in lane.iter().enumerate() {
            if v > lane[best] {
                best = k;
            }
        }
        best as u8
    })
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// `C x nx x ny` pooled features.
    pub pooled: Array3<f64>,
    pub classes: Array2<u8>,
    pub occlusion: OcclusionMap,
}

pub fn predict(grids: &CameraGrids, params: &PoolParams, cfg: &PipelineConfig) -> Result<Prediction> {
    let pooled = pool(grids.features.view(), grids.counts.view(), params)?;
    Ok(Prediction {
        classes: argmax_classes(pooled.view()),
        occlusion: occlusion_map(grids.merged_counts().view(), &cfg.occlusion)?,
        pooled,
    })
}

/// Everything produced for one scene.
#[derive(Debug, Clone)]
pub struct SceneRun {
    pub grids: CameraGrids,
    pub prediction: Prediction,
    pub gt: GtOcclusion,
    pub report: EvalReport,
}

/// Renders, lifts, splats and pools `scene` with freshly initialized
/// pooling parameters, then scores the result against ground truth.
pub fn run_scene(scene: &Scene, cameras: &[Camera], cfg: &PipelineConfig) -> Result<SceneRun> {
    if scene.extent != cfg.grid {
        return Err(Error::config("scene extent differs from the pipeline grid"));
    }
    let inputs = scene_inputs(scene, cameras, cfg)?;
    let grids = splat_inputs(&inputs, cameras, cfg)?;
    let params = PoolParams::initial(cfg.strategy, &grids, descriptors(cameras).view())?;
    let prediction = predict(&grids, &params, cfg)?;
    let gt = gt_occlusion(scene, cameras, cfg.subsamples)?;
    let report = evaluate(
        prediction.classes.view(),
        prediction.occlusion.p_occluded.view(),
        scene.semantic.view(),
        gt.p_occluded().view(),
    )?;
    Ok(SceneRun {
        grids,
        prediction,
        gt,
        report,
    })
}
