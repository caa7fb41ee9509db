//! Command implementations. Each returns the text it printed so tests can
//! inspect it without capturing stdout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fbev_core::learn::{self, LabelNoise, Model, TrainConfig};
use fbev_core::lift::{build_ray_grid, lift_points, LiftMode, LiftedPoints};
use fbev_core::metrics::{miou, EvalReport, IouAccumulator};
use fbev_core::occlusion::{occlusion_map, OcclusionConfig};
use fbev_core::pipeline::{argmax_classes, descriptors, DemoConfig, RectifyConfig};
use fbev_core::pool::{pool, splat, CameraGrids, PoolParams, PoolStrategy, Reduce};
use fbev_core::Error;
use ndarray::{Array2, Array3, Array4, Ix2, Ix3};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::export::{pgm_unit, ppm_classes};
use crate::fsutil::{read_text, write_atomic, write_text};
use crate::rig::Rig;
use crate::tensor_io::{read_tensor, write_tensor, Tensor};

fn shaped<D: ndarray::Dimension>(t: ndarray::ArrayD<f64>, path: &Path, what: &str) -> Result<ndarray::Array<f64, D>, Error> {
    let dims = t.shape().to_vec();
    t.into_dimensionality::<D>().map_err(|_| Error::File {
        path: path.display().to_string(),
        message: format!("{what} has dims {dims:?}"),
    })
}

fn load_f64<D: ndarray::Dimension>(path: &Path, what: &str) -> Result<ndarray::Array<f64, D>, Error> {
    shaped(read_tensor(path)?.to_f64(), path, what)
}

fn load_u8_2d(path: &Path) -> Result<Array2<u8>, Error> {
    let t = read_tensor(path)?.to_u8().map_err(|e| Error::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let dims = t.shape().to_vec();
    t.into_dimensionality::<Ix2>().map_err(|_| Error::File {
        path: path.display().to_string(),
        message: format!("class map has dims {dims:?}"),
    })
}

fn load_counts_3d(path: &Path) -> Result<ndarray::Array3<u32>, Error> {
    let fail = |message: String| Error::File {
        path: path.display().to_string(),
        message,
    };
    let t = read_tensor(path)?.to_counts().map_err(|e| fail(e.to_string()))?;
    let dims = t.shape().to_vec();
    t.into_dimensionality::<Ix3>().map_err(|_| fail(format!("counts have dims {dims:?}")))
}

fn save_report(out_dir: &Path, report: &EvalReport) -> Result<String, Error> {
    let text = format!("{report}\n");
    write_text(&out_dir.join("report.txt"), &text)?;
    write_text(&out_dir.join("report.kv"), &report.to_key_values())?;
    Ok(text)
}

fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = read_text(p)?;
            toml::from_str(&text).map_err(|e| {
                let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
                Error::File {
                    path: match line {
                        Some(l) => format!("{}:{l}", p.display()),
                        None => p.display().to_string(),
                    },
                    message: e.message().to_string(),
                }
            })
        }
    }
}

/// Inputs of [`project`].
#[derive(Debug, Clone)]
pub struct ProjectArgs {
    pub rig: PathBuf,
    /// Directory holding `<camera>.features.fbvt` (`Hf x Wf x C`) and
    /// `<camera>.depth.fbvt` (`Hf x Wf x D`) per camera.
    pub inputs: PathBuf,
    pub mode: LiftMode,
    pub reduce: Reduce,
    pub out_dir: PathBuf,
}

/// Builds ray grids, lifts every camera's features and splats them.
pub fn project(args: &ProjectArgs) -> Result<String> {
    let rig = Rig::load(&args.rig)?;
    let mut parts = Vec::with_capacity(rig.cameras.len());
    let mut log = String::new();
    for (k, cam) in rig.cameras.iter().enumerate() {
        let fpath = args.inputs.join(format!("{}.features.fbvt", cam.name));
        let dpath = args.inputs.join(format!("{}.depth.fbvt", cam.name));
        let features: Array3<f64> = load_f64(&fpath, "features")?;
        let depth: Array3<f64> = load_f64(&dpath, "depth distribution")?;
        let (hf, wf, _) = features.dim();
        let rays = build_ray_grid(&cam.intrinsics, (hf, wf)).with_context(|| format!("camera '{}'", cam.name))?;
        let points = lift_points(&rays, &cam.extrinsics, &rig.depth, features.view(), depth.view(), k as u32, args.mode)
            .with_context(|| format!("camera '{}'", cam.name))?;
        if points.is_empty() {
            eprintln!("warning: camera '{}' has no valid rays; it contributes no points", cam.name);
        }
        let mut dirs = Array3::<f64>::zeros((hf, wf, 3));
        let mut valid = Array2::<u8>::zeros((hf, wf));
        for i in 0..hf {
            for j in 0..wf {
                let d = rays.dir(i, j);
                for c in 0..3 {
                    dirs[(i, j, c)] = d[c];
                }
                valid[(i, j)] = u8::from(rays.is_valid(i, j));
            }
        }
        write_tensor(&args.out_dir.join(format!("{}.rays.fbvt", cam.name)), &Tensor::from_f64(&dirs))?;
        write_tensor(&args.out_dir.join(format!("{}.valid.fbvt", cam.name)), &Tensor::from_u8(&valid))?;
        writeln!(log, "{}: {}x{} rays, {} valid, {} points", cam.name, hf, wf, rays.valid_count(), points.len())?;
        parts.push(points);
    }
    let points = LiftedPoints::concat(&parts)?;
    let positions = Array2::from_shape_fn((points.len(), 3), |(n, c)| points.positions[n][c]);
    write_tensor(&args.out_dir.join("points.positions.fbvt"), &Tensor::from_f64(&positions))?;
    write_tensor(&args.out_dir.join("points.features.fbvt"), &Tensor::from_f64(&points.features))?;
    write_tensor(
        &args.out_dir.join("points.weights.fbvt"),
        &Tensor::from_f64(&ndarray::Array1::from(points.weights.clone())),
    )?;
    write_tensor(
        &args.out_dir.join("points.camera.fbvt"),
        &Tensor::from_counts(&ndarray::Array1::from(points.camera_id.clone()))?,
    )?;
    let grids = splat(&points, &rig.grid, rig.cameras.len(), args.reduce)?;
    write_grids(&args.out_dir, &grids)?;
    writeln!(log, "{} points, {} outside the grid", points.len(), grids.dropped)?;
    Ok(log)
}

pub fn write_grids(dir: &Path, grids: &CameraGrids) -> Result<(), Error> {
    write_tensor(&dir.join("grids.fbvt"), &Tensor::from_f64(&grids.features))?;
    write_tensor(&dir.join("counts.fbvt"), &Tensor::from_counts(&grids.counts)?)
}

/// Inputs of [`pool_cmd`].
#[derive(Debug, Clone)]
pub struct PoolArgs {
    pub grids: PathBuf,
    pub counts: PathBuf,
    pub strategy: PoolStrategy,
    /// Trained checkpoint directory; fresh initial parameters otherwise.
    pub params: Option<PathBuf>,
    /// Rig supplying intrinsic descriptors.
    pub rig: Option<PathBuf>,
    pub render: bool,
    pub out_dir: PathBuf,
}

pub fn pool_cmd(args: &PoolArgs) -> Result<String> {
    let features: Array4<f64> = load_f64(&args.grids, "per-camera grids")?;
    let counts = load_counts_3d(&args.counts)?;
    let grids = CameraGrids {
        features,
        counts,
        dropped: 0,
    };
    let k = grids.cameras();
    let desc = match &args.rig {
        Some(path) => {
            let rig = Rig::load(path)?;
            if rig.cameras.len() != k {
                return Err(Error::Shape(format!("rig has {} cameras, grids have {k}", rig.cameras.len())).into());
            }
            descriptors(&rig.cameras)
        }
        None if args.strategy == PoolStrategy::IntrinsicEmbed => {
            return Err(Error::Usage("intrinsic-embed pooling needs --rig for camera descriptors".into()).into());
        }
        None => Array2::zeros((k, fbev_core::camera::DESCRIPTOR_LEN)),
    };
    let mut params = PoolParams::initial(args.strategy, &grids, desc.view())?;
    if let Some(dir) = &args.params {
        let manifest = checkpoint::load_manifest(dir)?;
        checkpoint::load_pool_params(dir, &manifest, &mut params)?;
    }
    let pooled = pool(grids.features.view(), grids.counts.view(), &params)?;
    let classes = argmax_classes(pooled.view());
    let occ = occlusion_map(grids.merged_counts().view(), &OcclusionConfig::default())?;
    write_tensor(&args.out_dir.join("pooled.fbvt"), &Tensor::from_f64(&pooled))?;
    write_tensor(&args.out_dir.join("classes.fbvt"), &Tensor::from_u8(&classes))?;
    write_tensor(&args.out_dir.join("occlusion.fbvt"), &Tensor::from_f64(&occ.p_occluded))?;
    if args.render {
        write_atomic(&args.out_dir.join("classes.ppm"), &ppm_classes(classes.view()))?;
        write_atomic(&args.out_dir.join("occlusion.pgm"), &pgm_unit(occ.p_occluded.view()))?;
    }
    let (c, nx, ny) = pooled.dim();
    Ok(format!("pooled {k} cameras with {} into {c}x{nx}x{ny}\n", args.strategy.name()))
}

/// Inputs of [`eval`]: either four tensor files or five precomputed scores.
#[derive(Debug, Clone)]
pub enum EvalArgs {
    Files {
        pred_classes: PathBuf,
        pred_occlusion: PathBuf,
        gt_classes: PathBuf,
        gt_occlusion: PathBuf,
        out_dir: PathBuf,
    },
    /// Occlusion, vehicles, markings, street, background.
    Scores([f64; 5]),
}

pub fn eval(args: &EvalArgs) -> Result<String> {
    match args {
        EvalArgs::Scores(s) => {
            for v in s {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::Config(format!("IoU {v} outside [0, 1]")).into());
                }
            }
            Ok(format!("miou={:.3}\n", miou(s[0], s[1], s[2], s[3], s[4])))
        }
        EvalArgs::Files {
            pred_classes,
            pred_occlusion,
            gt_classes,
            gt_occlusion,
            out_dir,
        } => {
            let pc = load_u8_2d(pred_classes)?;
            let po: Array2<f64> = load_f64(pred_occlusion, "occlusion")?;
            let gc = load_u8_2d(gt_classes)?;
            let go: Array2<f64> = load_f64(gt_occlusion, "occlusion")?;
            let mut acc = IouAccumulator::new();
            acc.add(pc.view(), po.view(), gc.view(), go.view())?;
            Ok(save_report(out_dir, &acc.report())?)
        }
    }
}

/// Inputs of [`demo`].
#[derive(Debug, Clone)]
pub struct DemoArgs {
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub rectify: bool,
    pub out_dir: PathBuf,
}

pub fn demo(args: &DemoArgs) -> Result<String> {
    let mut cfg: DemoConfig = load_config(args.config.as_deref())?;
    if args.rectify && cfg.pipeline.rectify.is_none() {
        cfg.pipeline.rectify = Some(RectifyConfig::default());
    }
    let (scene, cameras, run) = cfg.run(args.seed)?;
    let out = &args.out_dir;
    let gt_p = run.gt.p_occluded();
    write_atomic(&out.join("classes.ppm"), &ppm_classes(run.prediction.classes.view()))?;
    write_atomic(&out.join("gt_classes.ppm"), &ppm_classes(scene.semantic.view()))?;
    write_atomic(&out.join("occlusion.pgm"), &pgm_unit(run.prediction.occlusion.p_occluded.view()))?;
    write_atomic(&out.join("gt_occlusion.pgm"), &pgm_unit(gt_p.view()))?;
    write_tensor(&out.join("classes.fbvt"), &Tensor::from_u8(&run.prediction.classes))?;
    write_tensor(&out.join("occlusion.fbvt"), &Tensor::from_f64(&run.prediction.occlusion.p_occluded))?;
    write_tensor(&out.join("gt_classes.fbvt"), &Tensor::from_u8(&scene.semantic))?;
    write_tensor(&out.join("gt_occlusion.fbvt"), &Tensor::from_f64(&gt_p))?;
    write_grids(out, &run.grids)?;
    let rig = Rig {
        grid: cfg.pipeline.grid,
        depth: cfg.pipeline.depth.clone(),
        cameras: cameras.clone(),
    };
    write_text(&out.join("rig.toml"), &rig.to_toml())?;
    let mut text = format!(
        "scene seed {}: {} vehicles, {} walls, {} cameras{}\n",
        args.seed,
        scene.vehicles.len(),
        scene.walls.len(),
        cameras.len(),
        if cfg.pipeline.rectify.is_some() { ", cylindrical rectification" } else { "" }
    );
    text.push_str(&save_report(out, &run.report)?);
    Ok(text)
}

/// Settings of `fbev train`, read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    /// Number of generated training scenes.
    pub scenes: usize,
    /// Scene and noise seed.
    pub seed: u64,
    /// Label noise on one camera; a mix of 0 disables it.
    pub noise: LabelNoise,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            scenes: 4,
            seed: 1,
            noise: learn::OVERLAP_NOISE,
            train: learn::overlap_train_config(),
        }
    }
}

impl TrainRunConfig {
    /// Hash of everything that shapes the trajectory except its length.
    pub fn trajectory_hash(&self) -> String {
        let mut c = self.clone();
        c.train.steps = 0;
        checkpoint::hash_text(&toml::to_string(&c).expect("config serializes"))
    }
}

/// Inputs of [`train`].
#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Continue from this checkpoint directory up to the configured step count.
    pub resume: Option<PathBuf>,
    pub out_dir: PathBuf,
}

pub fn train(args: &TrainArgs) -> Result<String> {
    let mut cfg: TrainRunConfig = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if cfg.scenes == 0 {
        return Err(Error::Config("scenes must be at least 1".into()).into());
    }
    cfg.train.validate()?;
    let fx = learn::overlap_fixture(cfg.scenes, cfg.seed)?;
    let noise = (cfg.noise.mix > 0.0).then_some(cfg.noise);
    let set = learn::prepare(&fx.scenes, &fx.cameras, &fx.pipeline, noise, cfg.seed)?;
    let model = Model::initial(cfg.train.strategy, &set)?;
    let hash = cfg.trajectory_hash();
    let state = match &args.resume {
        None => learn::TrainState::new(model, cfg.train.seed),
        Some(dir) => {
            let (state, manifest) = checkpoint::load_state(dir, model)?;
            if manifest.config_hash != hash {
                return Err(Error::Config(format!(
                    "{}: checkpoint was written with a different configuration",
                    dir.display()
                ))
                .into());
            }
            state
        }
    };
    let remaining = cfg.train.steps.saturating_sub(state.step);
    let state = learn::resume(&set, &cfg.train, state, remaining)?;
    checkpoint::save(&args.out_dir.join("checkpoint"), &state, &hash)?;
    let mut curve = String::from("# step total_loss\n");
    for (i, l) in state.loss_history.iter().enumerate() {
        writeln!(curve, "{} {l:.17e}", i + 1)?;
    }
    write_text(&args.out_dir.join("loss.txt"), &curve)?;
    let report = learn::evaluate_model(&set, &state.model)?;
    let mut text = match (state.loss_history.first(), state.loss_history.last()) {
        (Some(a), Some(b)) => format!("step {}: loss {a:.6} -> {b:.6}\n", state.step),
        _ => format!("step {}: no steps run\n", state.step),
    };
    if state.model.pool.cell_weights.is_some() && fx.cameras.len() == 2 {
        let (frac, n) = learn::weight_preference(&set, &state.model, 0, 1)?;
        writeln!(text, "camera 0 weighted above camera 1 in {:.1}% of {n} overlap cells", 100.0 * frac)?;
    }
    text.push_str(&save_report(&args.out_dir, &report)?);
    Ok(text)
}
