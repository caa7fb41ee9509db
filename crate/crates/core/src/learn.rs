//! Training of pooling parameters and a linear per-cell classifier.
//!
//! Features entering the lift are fixed renders, so each sample's per-camera
//! grids are computed once. A step pools them with the current parameters,
//! applies the head, evaluates the masked semantic loss plus the occlusion
//! BCE, and backpropagates analytically.

use nalgebra::Vector3;
use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraExtrinsics, CameraIntrinsics, DistortionModel, Projection};
use crate::error::{Error, Result};
use crate::lift::DepthBins;
use crate::loss::{occlusion_loss, semantic_loss_from_logits, total_loss, LossConfig, OccGradient};
use crate::metrics::{IouAccumulator, EvalReport, NUM_CLASSES};
use crate::occlusion::occlusion_map;
use crate::pipeline::{argmax_classes, descriptors, scene_inputs, splat_inputs, PipelineConfig};
use crate::pool::{pool, pool_backward, CameraGrids, GridSpec, PoolParams, PoolStrategy, Reduce};
use crate::scenesim::{gt_occlusion, make_scene, Scene, SceneParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Gd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: PoolStrategy,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: PoolStrategy::PerCellSensor,
            steps: 200,
            lr: 1e-4,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(Error::config("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        self.loss.validate()
    }
}

/// One training example: fixed per-camera grids and their labels.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub grids: CameraGrids,
    /// Occlusion probability derived from splat coverage.
    pub coverage: Array2<f64>,
    pub gt_class: Array2<u8>,
    pub visibility: Array2<f64>,
    /// 1 where the cell is occluded.
    pub gt_occluded: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSet {
    pub samples: Vec<TrainSample>,
    /// `K x P` intrinsic descriptors of the rig.
    pub descriptors: Array2<f64>,
}

/// Corrupts one camera's features before lifting: every pixel becomes
/// `(1 - mix)·onehot(true) + mix·onehot(other)` with `other` drawn uniformly
/// from the remaining scored classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelNoise {
    pub camera: usize,
    pub mix: f64,
}

/// Renders, lifts and splats `scenes` into training samples.
pub fn prepare(
    scenes: &[Scene],
    cameras: &[Camera],
    cfg: &PipelineConfig,
    noise: Option<LabelNoise>,
    seed: u64,
) -> Result<TrainSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut inputs = scene_inputs(scene, cameras, cfg)?;
        if let Some(n) = noise {
            let input = inputs
                .get_mut(n.camera)
                .ok_or_else(|| Error::config(format!("noise camera {} out of range", n.camera)))?;
            for mut px in input.features.lanes_mut(Axis(2)) {
                let Some(truth) = px.iter().position(|&v| v == 1.0) else { continue };
                if truth == 0 {
                    continue;
                }
                let mut other = rng.random_range(1..NUM_CLASSES - 1);
                if other >= truth {
                    other += 1;
                }
                px[truth] = 1.0 - n.mix;
                px[other] += n.mix;
            }
        }
        let grids = splat_inputs(&inputs, cameras, cfg)?;
        let coverage = occlusion_map(grids.merged_counts().view(), &cfg.occlusion)?.p_occluded;
        let gt = gt_occlusion(scene, cameras, cfg.subsamples)?;
        samples.push(TrainSample {
            grids,
            coverage,
            gt_class: scene.semantic.clone(),
            visibility: gt.visibility,
            gt_occluded: gt.occluded,
        });
    }
    Ok(TrainSet {
        samples,
        descriptors: descriptors(cameras),
    })
}

impl TrainSet {
    /// Features averaged and counts summed over samples; used to initialize
    /// per-cell weights and feature means.
    pub fn calibration(&self) -> Result<CameraGrids> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::config("training set is empty"))?;
        let mut out = first.grids.clone();
        out.features.fill(0.0);
        out.counts.fill(0);
        for s in &self.samples {
            if s.grids.features.dim() != out.features.dim() {
                return Err(Error::shape("samples have different grid shapes"));
            }
            out.features += &s.grids.features;
            out.counts += &s.grids.counts;
        }
        out.features /= self.samples.len() as f64;
        Ok(out)
    }
}

/// Linear classifier shared across cells plus a logistic occlusion unit on
/// the coverage-based occlusion probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `C_feat x C_class`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// `[scale, offset]` of the occlusion logit `scale·(2p - 1) + offset`.
    pub occ: Array1<f64>,
}

impl Head {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Self {
            weight: Array2::zeros((features, classes)),
            bias: Array1::zeros(classes),
            occ: Array1::zeros(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub pool: PoolParams,
    pub head: Head,
}

fn contiguous(s: Option<&[f64]>) -> &[f64] {
    s.expect("model tensors are contiguous")
}

fn contiguous_mut(s: Option<&mut [f64]>) -> &mut [f64] {
    s.expect("model tensors are contiguous")
}

impl Model {
    pub fn initial(strategy: PoolStrategy, set: &TrainSet) -> Result<Self> {
        let calib = set.calibration()?;
        Ok(Self {
            pool: PoolParams::initial(strategy, &calib, set.descriptors.view())?,
            head: Head::zeros(calib.channels(), NUM_CLASSES),
        })
    }

    /// Named learnable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = self.pool.tensors();
        out.push(("head.weight", contiguous(self.head.weight.as_slice())));
        out.push(("head.bias", contiguous(self.head.bias.as_slice())));
        out.push(("head.occ", contiguous(self.head.occ.as_slice())));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = self.pool.tensors_mut();
        out.push(("head.weight", contiguous_mut(self.head.weight.as_slice_mut())));
        out.push(("head.bias", contiguous_mut(self.head.bias.as_slice_mut())));
        out.push(("head.occ", contiguous_mut(self.head.occ.as_slice_mut())));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, s)| s.iter().copied()).collect()
    }

    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|(_, s)| s.len()).sum();
        if flat.len() != total {
            return Err(Error::shape(format!("{} values for {total} parameters", flat.len())));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// `tensor[index]` name of flat parameter `i`.
    pub fn param_name(&self, mut i: usize) -> String {
        for (name, t) in self.tensors() {
            if i < t.len() {
                return format!("{name}[{i}]");
            }
            i -= t.len();
        }
        format!("<out of range {i}>")
    }

    /// Class logits and occlusion probability for one sample.
    pub fn forward(&self, sample: &TrainSample) -> Result<(Array3<f64>, Array3<f64>, Array2<f64>)> {
        let pooled = pool(sample.grids.features.view(), sample.grids.counts.view(), &self.pool)?;
        let (c, nx, ny) = pooled.dim();
        if self.head.weight.nrows() != c {
            return Err(Error::shape(format!("head expects {} channels, got {c}", self.head.weight.nrows())));
        }
        let flat = pooled.view().into_shape_with_order((c, nx * ny)).map_err(|e| Error::shape(e.to_string()))?;
        let mut logits = self.head.weight.t().dot(&flat);
        for (mut row, &b) in logits.outer_iter_mut().zip(self.head.bias.iter()) {
            row += b;
        }
        let logits = logits
            .into_shape_with_order((self.head.bias.len(), nx, ny))
            .map_err(|e| Error::shape(e.to_string()))?;
        let (a, b) = (self.head.occ[0], self.head.occ[1]);
        let occ = sample.coverage.mapv(|p| sigmoid(a * (2.0 * p - 1.0) + b));
        Ok((pooled, logits, occ))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub semantic: f64,
    pub occlusion: f64,
}

/// Mean total loss over the set and its gradient in [`Model::flatten`] order.
pub fn objective(set: &TrainSet, model: &Model, loss: &LossConfig) -> Result<(LossParts, Vec<f64>)> {
    if set.samples.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let scale = 1.0 / set.samples.len() as f64;
    let mut parts = LossParts::default();
    let mut grad = vec![0.0; model.flatten().len()];
    for sample in &set.samples {
        let (pooled, logits, occ) = model.forward(sample)?;
        let sem = semantic_loss_from_logits(logits.view(), sample.gt_class.view(), sample.visibility.view(), loss)?;
        let bce = occlusion_loss(occ.view(), sample.gt_occluded.view(), loss.eps, OccGradient::Logit)?;
        parts.semantic += scale * sem.loss;
        parts.occlusion += scale * bce.loss;

        let (c, nx, ny) = pooled.dim();
        let k = sem.grad.dim().0;
        let g = sem.grad.into_shape_with_order((k, nx * ny)).map_err(|e| Error::shape(e.to_string()))?;
        let p = pooled.view().into_shape_with_order((c, nx * ny)).map_err(|e| Error::shape(e.to_string()))?;
        let g_weight = p.dot(&g.t());
        let g_bias = g.sum_axis(Axis(1));
        let upstream = model
            .head
            .weight
            .dot(&g)
            .into_shape_with_order((c, nx, ny))
            .map_err(|e| Error::shape(e.to_string()))?;
        let pg = pool_backward(
            sample.grids.features.view(),
            sample.grids.counts.view(),
            &model.pool,
            upstream.view(),
        )?;
        let mut g_occ = [0.0; 2];
        for (&dz, &p) in bce.grad.iter().zip(sample.coverage.iter()) {
            let dz = loss.lambda * dz;
            g_occ[0] += dz * (2.0 * p - 1.0);
            g_occ[1] += dz;
        }

        let pieces = pg
            .tensors()
            .into_iter()
            .map(|(_, s)| s.to_vec())
            .chain([
                g_weight.iter().copied().collect(),
                g_bias.to_vec(),
                g_occ.to_vec(),
            ]);
        let mut offset = 0;
        for piece in pieces {
            for (dst, v) in grad[offset..offset + piece.len()].iter_mut().zip(piece.iter()) {
                *dst += scale * v;
            }
            offset += piece.len();
        }
        if offset != grad.len() {
            return Err(Error::shape("gradient layout does not match parameters"));
        }
    }
    parts.total = total_loss(parts.semantic, parts.occlusion, loss.lambda);
    Ok((parts, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub step: usize,
    /// Total loss before each step's update.
    pub loss_history: Vec<f64>,
    pub rng_seed: u64,
    /// Adam first and second moments, in flat parameter order.
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        let n = model.flatten().len();
        Self {
            model,
            step: 0,
            loss_history: Vec::new(),
            rng_seed: seed,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        }
    }
}

/// Trains a fresh model for `cfg.steps` steps.
pub fn train(set: &TrainSet, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let state = TrainState::new(Model::initial(cfg.strategy, set)?, cfg.seed);
    resume(set, cfg, state, cfg.steps)
}

/// Continues `state` for `steps` more steps.
pub fn resume(set: &TrainSet, cfg: &TrainConfig, mut state: TrainState, steps: usize) -> Result<TrainState> {
    cfg.validate()?;
    let mut x = state.model.flatten();
    if state.adam_m.len() != x.len() || state.adam_v.len() != x.len() {
        return Err(Error::shape("optimizer state does not match the model"));
    }
    for _ in 0..steps {
        let step = state.step + 1;
        let (parts, grad) = objective(set, &state.model, &cfg.loss)?;
        if !parts.total.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("loss is {}", parts.total),
            });
        }
        match cfg.optimizer {
            Optimizer::Gd => {
                for (xi, gi) in x.iter_mut().zip(&grad) {
                    *xi -= cfg.lr * gi;
                }
            }
            Optimizer::Adam => {
                let c1 = 1.0 - cfg.beta1.powi(step as i32);
                let c2 = 1.0 - cfg.beta2.powi(step as i32);
                for (((xi, gi), m), v) in x.iter_mut().zip(&grad).zip(&mut state.adam_m).zip(&mut state.adam_v) {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                    *xi -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
                }
            }
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Training {
                step,
                message: format!("parameter {} became {}", state.model.param_name(i), x[i]),
            });
        }
        state.model.assign(&x)?;
        state.loss_history.push(parts.total);
        state.step = step;
    }
    Ok(state)
}

/// Scores the model's argmax predictions and thresholded occlusion output
/// over every sample.
pub fn evaluate_model(set: &TrainSet, model: &Model) -> Result<EvalReport> {
    let mut acc = IouAccumulator::new();
    for s in &set.samples {
        let (_, logits, occ) = model.forward(s)?;
        let gt_p = s.visibility.mapv(|v| 1.0 - v);
        acc.add(argmax_classes(logits.view()).view(), occ.view(), s.gt_class.view(), gt_p.view())?;
    }
    Ok(acc.report())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-7, 1e-3]`.
    pub h: f64,
    /// Above this many parameters a seeded random subset is checked.
    pub max_params: usize,
    pub seed: u64,
    /// Smallest denominator of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_params: 1000,
            seed: 0,
            floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |a - n| / max(|a|, |n|, floor)` over checked parameters.
    pub max_rel_error: f64,
    /// Index of the worst parameter.
    pub worst: usize,
    pub checked: usize,
}

/// Compares the gradient returned by `f` at `x0` against central
/// differences of its value.
pub fn grad_check<F>(f: F, x0: &[f64], opts: &GradCheckOptions) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(Error::config(format!("finite-difference step {} outside [1e-7, 1e-3]", opts.h)));
    }
    let (_, analytic) = f(x0)?;
    if analytic.len() != x0.len() {
        return Err(Error::shape("gradient length differs from parameter count"));
    }
    let mut indices: Vec<usize> = (0..x0.len()).collect();
    if indices.len() > opts.max_params {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for i in 0..opts.max_params {
            let j = rng.random_range(i..indices.len());
            indices.swap(i, j);
        }
        indices.truncate(opts.max_params);
        indices.sort_unstable();
    }
    let mut x = x0.to_vec();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: 0,
        checked: indices.len(),
    };
    for &i in &indices {
        x[i] = x0[i] + opts.h;
        let plus = f(&x)?.0;
        x[i] = x0[i] - opts.h;
        let minus = f(&x)?.0;
        x[i] = x0[i];
        let numeric = (plus - minus) / (2.0 * opts.h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if err > out.max_rel_error {
            out.max_rel_error = err;
            out.worst = i;
        }
    }
    Ok(out)
}

/// [`grad_check`] of [`objective`] over every model parameter.
pub fn grad_check_model(set: &TrainSet, model: &Model, loss: &LossConfig, opts: &GradCheckOptions) -> Result<GradCheck> {
    let f = |x: &[f64]| {
        let mut m = model.clone();
        m.assign(x)?;
        let (parts, g) = objective(set, &m, loss)?;
        Ok((parts.total, g))
    };
    grad_check(f, &model.flatten(), opts)
}

/// Cells observed by both cameras in every sample.
pub fn overlap_cells(set: &TrainSet, a: usize, b: usize) -> Result<Array2<bool>> {
    let first = set.samples.first().ok_or_else(|| Error::config("training set is empty"))?;
    let k = first.grids.cameras();
    if a >= k || b >= k {
        return Err(Error::config(format!("camera index out of range for {k} cameras")));
    }
    let (_, nx, ny) = first.grids.counts.dim();
    let mut out = Array2::from_elem((nx, ny), true);
    for s in &set.samples {
        for (cell, o) in out.indexed_iter_mut() {
            *o &= s.grids.counts[(a, cell.0, cell.1)] > 0 && s.grids.counts[(b, cell.0, cell.1)] > 0;
        }
    }
    Ok(out)
}

/// Fraction of overlap cells whose learned per-cell weight for camera
/// `preferred` exceeds that of `other`, and the number of overlap cells.
pub fn weight_preference(set: &TrainSet, model: &Model, preferred: usize, other: usize) -> Result<(f64, usize)> {
    let w = model
        .pool
        .cell_weights
        .as_ref()
        .ok_or_else(|| Error::config("model has no per-cell weights"))?;
    let overlap = overlap_cells(set, preferred, other)?;
    let (mut total, mut hits) = (0usize, 0usize);
    for ((i, j), &o) in overlap.indexed_iter() {
        if o {
            total += 1;
            hits += usize::from(w[(preferred, i, j)] > w[(other, i, j)]);
        }
    }
    let frac = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    Ok((frac, total))
}

/// Noise applied to the second camera of [`overlap_fixture`].
pub const OVERLAP_NOISE: LabelNoise = LabelNoise { camera: 1, mix: 0.5 };

/// Training settings for [`overlap_fixture`].
pub fn overlap_train_config() -> TrainConfig {
    TrainConfig {
        strategy: PoolStrategy::PerCellSensor,
        steps: 200,
        lr: 0.05,
        optimizer: Optimizer::Adam,
        ..TrainConfig::default()
    }
}

/// A two-camera rig with overlapping forward views, its scenes and a
/// pipeline configuration for the noisy-overlap training fixture.
#[derive(Debug, Clone)]
pub struct OverlapFixture {
    pub cameras: Vec<Camera>,
    pub pipeline: PipelineConfig,
    pub scenes: Vec<Scene>,
}

/// Builds the fixture with `scenes` seeded scenes. Camera 0 is the clean one.
pub fn overlap_fixture(scenes: usize, seed: u64) -> Result<OverlapFixture> {
    let (w, h) = (240, 150);
    let model = DistortionModel::with_default_range(Projection::DoubleSphere { xi: -0.2, alpha: 0.6 }, 75.0)?;
    let intr = CameraIntrinsics::new(model, w as f64 / 2.0, h as f64 / 2.0, w, h)?;
    let cameras = [("left", 0.35, 0.6), ("right", -0.35, -0.6)]
        .into_iter()
        .map(|(name, yaw, y)| Camera {
            name: name.to_string(),
            intrinsics: intr.clone(),
            extrinsics: CameraExtrinsics::looking(yaw, 0.6, Vector3::new(1.5, y, 2.5)),
        })
        .collect::<Vec<_>>();
    let pipeline = PipelineConfig {
        grid: GridSpec::new(-2.0, 14.0, -8.0, 8.0, 0.25)?,
        depth: DepthBins::new(0.5, 20.0, 0.1)?,
        stride: 1,
        reduce: Reduce::Mean,
        strategy: PoolStrategy::PerCellSensor,
        ..PipelineConfig::default()
    };
    let params = SceneParams {
        vehicles: 3,
        walls: 1,
        ..SceneParams::default()
    };
    let scenes = (0..scenes as u64)
        .map(|k| make_scene(&pipeline.grid, seed + k, &params))
        .collect::<Result<Vec<_>>>()?;
    Ok(OverlapFixture {
        cameras,
        pipeline,
        scenes,
    })
}
