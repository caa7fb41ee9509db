//! Merging per-camera BEV rasters into one grid.
//!
//! Besides the symmetric reductions there are three learnable strategies:
//! an elementwise weight per camera, channel and cell; one weight per camera
//! and cell initialized to `1 / N` over the cameras that reach the cell; and
//! a mean-centered, intrinsics-conditioned scale plus a learnable embedding
//! per camera.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use super::CameraGrids;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolStrategy {
    Sum,
    Max,
    Mean,
    WeightedSum,
    PerCellSensor,
    IntrinsicEmbed,
}

impl PoolStrategy {
    pub const ALL: [PoolStrategy; 6] = [
        PoolStrategy::Sum,
        PoolStrategy::Max,
        PoolStrategy::Mean,
        PoolStrategy::WeightedSum,
        PoolStrategy::PerCellSensor,
        PoolStrategy::IntrinsicEmbed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolStrategy::Sum => "sum",
            PoolStrategy::Max => "max",
            PoolStrategy::Mean => "mean",
            PoolStrategy::WeightedSum => "weighted-sum",
            PoolStrategy::PerCellSensor => "per-cell-sensor",
            PoolStrategy::IntrinsicEmbed => "intrinsic-embed",
        }
    }

    pub fn is_learnable(self) -> bool {
        matches!(
            self,
            PoolStrategy::WeightedSum | PoolStrategy::PerCellSensor | PoolStrategy::IntrinsicEmbed
        )
    }
}

impl std::str::FromStr for PoolStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown pooling strategy '{s}'")))
    }
}

/// Parameters of the intrinsics-conditioned embedding pool.
///
/// The per-camera channel scale is `map_weight · descriptor_k + map_bias`,
/// where `descriptor_k` is the camera's normalized intrinsic vector.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicEmbed {
    /// `K x C x nx x ny`
    pub embed: Array4<f64>,
    /// `K x C` feature means subtracted before scaling.
    pub mu: Array2<f64>,
    /// `C x P`
    pub map_weight: Array2<f64>,
    /// `C`
    pub map_bias: Array1<f64>,
    /// `K x P`, fixed by calibration.
    pub descriptors: Array2<f64>,
}

impl IntrinsicEmbed {
    /// Zero embedding with a map producing all-ones scales.
    pub fn new(descriptors: Array2<f64>, mu: Array2<f64>, nx: usize, ny: usize) -> Result<Self> {
        let (k, p) = descriptors.dim();
        let (km, c) = mu.dim();
        if km != k {
            return Err(Error::shape(format!("mu has {km} cameras, descriptors {k}")));
        }
        Ok(Self {
            embed: Array4::zeros((k, c, nx, ny)),
            mu,
            map_weight: Array2::zeros((c, p)),
            map_bias: Array1::ones(c),
            descriptors,
        })
    }

    /// `K x C` per-camera channel scales.
    pub fn scales(&self) -> Array2<f64> {
        let mut out = self.descriptors.dot(&self.map_weight.t());
        out += &self.map_bias;
        out
    }
}

/// Parameters for every strategy; only the active strategy's fields are read.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolParams {
    pub strategy: PoolStrategy,
    /// `K x C x nx x ny`
    pub weights: Option<Array4<f64>>,
    /// `K x nx x ny`
    pub cell_weights: Option<Array3<f64>>,
    pub embed: Option<IntrinsicEmbed>,
}

impl PoolParams {
    /// Parameters for a non-learnable reduction.
    pub fn fixed(strategy: PoolStrategy) -> Self {
        Self {
            strategy,
            weights: None,
            cell_weights: None,
            embed: None,
        }
    }

    pub fn weighted_sum(weights: Array4<f64>) -> Self {
        Self {
            weights: Some(weights),
            ..Self::fixed(PoolStrategy::WeightedSum)
        }
    }

    pub fn per_cell(cell_weights: Array3<f64>) -> Self {
        Self {
            cell_weights: Some(cell_weights),
            ..Self::fixed(PoolStrategy::PerCellSensor)
        }
    }

    /// Per-cell weights initialized to `1 / N_ij` for the `N_ij` cameras with
    /// points in the cell, zero elsewhere.
    pub fn per_cell_from_counts(counts: ArrayView3<'_, u32>) -> Self {
        let (k, nx, ny) = counts.dim();
        let mut w = Array3::zeros((k, nx, ny));
        for i in 0..nx {
            for j in 0..ny {
                let n = (0..k).filter(|&c| counts[(c, i, j)] > 0).count();
                if n == 0 {
                    continue;
                }
                for c in 0..k {
                    if counts[(c, i, j)] > 0 {
                        w[(c, i, j)] = 1.0 / n as f64;
                    }
                }
            }
        }
        Self::per_cell(w)
    }

    pub fn intrinsic_embed(embed: IntrinsicEmbed) -> Self {
        Self {
            embed: Some(embed),
            ..Self::fixed(PoolStrategy::IntrinsicEmbed)
        }
    }

    /// Default initialization of `strategy` for the given splat output:
    /// unit weights, `1/N` per-cell weights, or a zero embedding with means
    /// taken from the grids and unit scales.
    pub fn initial(strategy: PoolStrategy, grids: &CameraGrids, descriptors: ArrayView2<'_, f64>) -> Result<Self> {
        let (k, c, nx, ny) = grids.features.dim();
        Ok(match strategy {
            PoolStrategy::Sum | PoolStrategy::Max | PoolStrategy::Mean => Self::fixed(strategy),
            PoolStrategy::WeightedSum => Self::weighted_sum(Array4::ones((k, c, nx, ny))),
            PoolStrategy::PerCellSensor => Self::per_cell_from_counts(grids.counts.view()),
            PoolStrategy::IntrinsicEmbed => {
                if descriptors.nrows() != k {
                    return Err(Error::shape(format!(
                        "{} descriptors for {k} cameras",
                        descriptors.nrows()
                    )));
                }
                Self::intrinsic_embed(IntrinsicEmbed::new(descriptors.to_owned(), camera_means(grids), nx, ny)?)
            }
        })
    }

    /// Learnable tensors of the active strategy in a fixed order, with names.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        match self.strategy {
            PoolStrategy::WeightedSum => {
                if let Some(w) = &self.weights {
                    out.push(("pool.weights", slice(w.as_slice())));
                }
            }
            PoolStrategy::PerCellSensor => {
                if let Some(w) = &self.cell_weights {
                    out.push(("pool.cell_weights", slice(w.as_slice())));
                }
            }
            PoolStrategy::IntrinsicEmbed => {
                if let Some(e) = &self.embed {
                    out.push(("pool.embed", slice(e.embed.as_slice())));
                    out.push(("pool.mu", slice(e.mu.as_slice())));
                    out.push(("pool.map_weight", slice(e.map_weight.as_slice())));
                    out.push(("pool.map_bias", slice(e.map_bias.as_slice())));
                }
            }
            _ => {}
        }
        out
    }

    /// Mutable view of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = Vec::new();
        match self.strategy {
            PoolStrategy::WeightedSum => {
                if let Some(w) = &mut self.weights {
                    out.push(("pool.weights", slice_mut(w.as_slice_mut())));
                }
            }
            PoolStrategy::PerCellSensor => {
                if let Some(w) = &mut self.cell_weights {
                    out.push(("pool.cell_weights", slice_mut(w.as_slice_mut())));
                }
            }
            PoolStrategy::IntrinsicEmbed => {
                if let Some(e) = &mut self.embed {
                    out.push(("pool.embed", slice_mut(e.embed.as_slice_mut())));
                    out.push(("pool.mu", slice_mut(e.mu.as_slice_mut())));
                    out.push(("pool.map_weight", slice_mut(e.map_weight.as_slice_mut())));
                    out.push(("pool.map_bias", slice_mut(e.map_bias.as_slice_mut())));
                }
            }
            _ => {}
        }
        out
    }

    fn require_weights(&self) -> Result<&Array4<f64>> {
        self.weights
            .as_ref()
            .ok_or_else(|| Error::config("weighted-sum pooling needs weights"))
    }

    fn require_cell_weights(&self) -> Result<&Array3<f64>> {
        self.cell_weights
            .as_ref()
            .ok_or_else(|| Error::config("per-cell pooling needs cell weights"))
    }

    fn require_embed(&self) -> Result<&IntrinsicEmbed> {
        self.embed
            .as_ref()
            .ok_or_else(|| Error::config("intrinsic-embed pooling needs embedding parameters"))
    }
}

fn slice(s: Option<&[f64]>) -> &[f64] {
    s.expect("parameter tensors are contiguous")
}

fn slice_mut(s: Option<&mut [f64]>) -> &mut [f64] {
    s.expect("parameter tensors are contiguous")
}

/// Gradients of a scalar loss with respect to the pooling inputs and the
/// active strategy's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolGrads {
    pub per_camera: Array4<f64>,
    pub weights: Option<Array4<f64>>,
    pub cell_weights: Option<Array3<f64>>,
    pub embed: Option<Array4<f64>>,
    pub mu: Option<Array2<f64>>,
    pub map_weight: Option<Array2<f64>>,
    pub map_bias: Option<Array1<f64>>,
}

impl PoolGrads {
    /// Parameter gradients in the order of [`PoolParams::tensors`].
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        if let Some(w) = &self.weights {
            out.push(("pool.weights", slice(w.as_slice())));
        }
        if let Some(w) = &self.cell_weights {
            out.push(("pool.cell_weights", slice(w.as_slice())));
        }
        if let (Some(e), Some(m), Some(a), Some(b)) = (&self.embed, &self.mu, &self.map_weight, &self.map_bias) {
            out.push(("pool.embed", slice(e.as_slice())));
            out.push(("pool.mu", slice(m.as_slice())));
            out.push(("pool.map_weight", slice(a.as_slice())));
            out.push(("pool.map_bias", slice(b.as_slice())));
        }
        out
    }
}

/// Per-channel mean of each camera's features over the cells it reaches.
pub fn camera_means(grids: &CameraGrids) -> Array2<f64> {
    let (k, c, nx, ny) = grids.features.dim();
    let mut mu = Array2::zeros((k, c));
    for cam in 0..k {
        let mut n = 0usize;
        let mut acc = vec![0.0; c];
        for i in 0..nx {
            for j in 0..ny {
                if grids.counts[(cam, i, j)] == 0 {
                    continue;
                }
                n += 1;
                for (ch, a) in acc.iter_mut().enumerate() {
                    *a += grids.features[(cam, ch, i, j)];
                }
            }
        }
        if n > 0 {
            for (ch, a) in acc.into_iter().enumerate() {
                mu[(cam, ch)] = a / n as f64;
            }
        }
    }
    mu
}

fn check_counts(per_camera: &ArrayView4<'_, f64>, counts: &ArrayView3<'_, u32>) -> Result<()> {
    let (k, _, nx, ny) = per_camera.dim();
    if counts.dim() != (k, nx, ny) {
        return Err(Error::shape(format!(
            "counts {:?} do not match features {:?}",
            counts.dim(),
            per_camera.dim()
        )));
    }
    Ok(())
}

pub fn pool_sum(per_camera: ArrayView4<'_, f64>) -> Array3<f64> {
    per_camera.sum_axis(Axis(0))
}

/// Elementwise maximum over the cameras that reach each cell (zero where
/// none does); ties keep the lowest camera index.
pub fn pool_max(per_camera: ArrayView4<'_, f64>, counts: ArrayView3<'_, u32>) -> Result<Array3<f64>> {
    check_counts(&per_camera, &counts)?;
    let (_, c, nx, ny) = per_camera.dim();
    let arg = max_camera(&per_camera, &counts);
    Ok(Array3::from_shape_fn((c, nx, ny), |(ch, i, j)| {
        arg[(ch, i, j)].map_or(0.0, |k| per_camera[(k, ch, i, j)])
    }))
}

fn max_camera(per_camera: &ArrayView4<'_, f64>, counts: &ArrayView3<'_, u32>) -> Array3<Option<usize>> {
    let (k, c, nx, ny) = per_camera.dim();
    Array3::from_shape_fn((c, nx, ny), |(ch, i, j)| {
        let mut best: Option<usize> = None;
        for cam in 0..k {
            if counts[(cam, i, j)] == 0 {
                continue;
            }
            if best.is_none_or(|b| per_camera[(cam, ch, i, j)] > per_camera[(b, ch, i, j)]) {
                best = Some(cam);
            }
        }
        best
    })
}

/// Mean over the cameras that reach each cell (zero where none does).
pub fn pool_mean(per_camera: ArrayView4<'_, f64>, counts: ArrayView3<'_, u32>) -> Result<Array3<f64>> {
    check_counts(&per_camera, &counts)?;
    let (k, c, nx, ny) = per_camera.dim();
    let n = contributing(&counts);
    Ok(Array3::from_shape_fn((c, nx, ny), |(ch, i, j)| {
        if n[(i, j)] == 0 {
            return 0.0;
        }
        let acc: f64 = (0..k)
            .filter(|&cam| counts[(cam, i, j)] > 0)
            .map(|cam| per_camera[(cam, ch, i, j)])
            .sum();
        acc / n[(i, j)] as f64
    }))
}

fn contributing(counts: &ArrayView3<'_, u32>) -> Array2<usize> {
    counts.map(|&c| usize::from(c > 0)).sum_axis(Axis(0))
}

/// `Σ_k W_k ⊙ F_k`
pub fn pool_weighted_sum(per_camera: ArrayView4<'_, f64>, weights: ArrayView4<'_, f64>) -> Result<Array3<f64>> {
    if per_camera.dim() != weights.dim() {
        return Err(Error::shape(format!(
            "weights {:?} do not match features {:?}",
            weights.dim(),
            per_camera.dim()
        )));
    }
    Ok((&per_camera * &weights).sum_axis(Axis(0)))
}

/// `Σ_k w[k,i,j] · F_k[c,i,j]`
pub fn pool_per_cell(per_camera: ArrayView4<'_, f64>, cell_weights: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    let (k, c, nx, ny) = per_camera.dim();
    if cell_weights.dim() != (k, nx, ny) {
        return Err(Error::shape(format!(
            "cell weights {:?} do not match features {:?}",
            cell_weights.dim(),
            per_camera.dim()
        )));
    }
    let mut out = Array3::zeros((c, nx, ny));
    for cam in 0..k {
        let w = cell_weights.slice(s![cam, .., ..]);
        for ch in 0..c {
            let f = per_camera.slice(s![cam, ch, .., ..]);
            let mut o = out.slice_mut(s![ch, .., ..]);
            o += &(&f * &w);
        }
    }
    Ok(out)
}

fn check_embed(per_camera: &ArrayView4<'_, f64>, e: &IntrinsicEmbed) -> Result<()> {
    let (k, c, _, _) = per_camera.dim();
    let p = e.descriptors.ncols();
    if e.embed.dim() != per_camera.dim()
        || e.mu.dim() != (k, c)
        || e.map_weight.dim() != (c, p)
        || e.map_bias.len() != c
        || e.descriptors.nrows() != k
    {
        return Err(Error::shape(format!(
            "embedding parameters do not match features {:?}",
            per_camera.dim()
        )));
    }
    Ok(())
}

/// `Σ_k scale_k ⊙ (F_k − μ_k) + E_k`, with `μ_k` and `scale_k` broadcast over
/// cells. The embedding is added everywhere, including cells no camera sees.
pub fn pool_intrinsic_embed(per_camera: ArrayView4<'_, f64>, params: &IntrinsicEmbed) -> Result<Array3<f64>> {
    check_embed(&per_camera, params)?;
    let (k, c, nx, ny) = per_camera.dim();
    let scales = params.scales();
    let mut out = Array3::zeros((c, nx, ny));
    for cam in 0..k {
        for ch in 0..c {
            let a = scales[(cam, ch)];
            let m = params.mu[(cam, ch)];
            let f = per_camera.slice(s![cam, ch, .., ..]);
            let e = params.embed.slice(s![cam, ch, .., ..]);
            let mut o = out.slice_mut(s![ch, .., ..]);
            ndarray::Zip::from(&mut o).and(&f).and(&e).for_each(|o, &f, &e| {
                *o += a * (f - m) + e;
            });
        }
    }
    Ok(out)
}

/// Dispatches to the configured strategy.
pub fn pool(per_camera: ArrayView4<'_, f64>, counts: ArrayView3<'_, u32>, params: &PoolParams) -> Result<Array3<f64>> {
    check_counts(&per_camera, &counts)?;
    match params.strategy {
        PoolStrategy::Sum => Ok(pool_sum(per_camera)),
        PoolStrategy::Max => pool_max(per_camera, counts),
        PoolStrategy::Mean => pool_mean(per_camera, counts),
        PoolStrategy::WeightedSum => pool_weighted_sum(per_camera, params.require_weights()?.view()),
        PoolStrategy::PerCellSensor => pool_per_cell(per_camera, params.require_cell_weights()?.view()),
        PoolStrategy::IntrinsicEmbed => pool_intrinsic_embed(per_camera, params.require_embed()?),
    }
}

/// Analytic gradients of `⟨upstream, pool(per_camera)⟩`.
pub fn pool_backward(
    per_camera: ArrayView4<'_, f64>,
    counts: ArrayView3<'_, u32>,
    params: &PoolParams,
    upstream: ArrayView3<'_, f64>,
) -> Result<PoolGrads> {
    check_counts(&per_camera, &counts)?;
    let (k, c, nx, ny) = per_camera.dim();
    if upstream.dim() != (c, nx, ny) {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match pooled output {:?}",
            upstream.dim(),
            (c, nx, ny)
        )));
    }
    let mut grads = PoolGrads {
        per_camera: Array4::zeros((k, c, nx, ny)),
        weights: None,
        cell_weights: None,
        embed: None,
        mu: None,
        map_weight: None,
        map_bias: None,
    };
    let broadcast = |g: &mut Array4<f64>, scale: &dyn Fn(usize, usize, usize, usize) -> f64| {
        for ((cam, ch, i, j), v) in g.indexed_iter_mut() {
            *v = upstream[(ch, i, j)] * scale(cam, ch, i, j);
        }
    };
    match params.strategy {
        PoolStrategy::Sum => broadcast(&mut grads.per_camera, &|_, _, _, _| 1.0),
        PoolStrategy::Max => {
            let arg = max_camera(&per_camera, &counts);
            broadcast(&mut grads.per_camera, &|cam, ch, i, j| {
                if arg[(ch, i, j)] == Some(cam) {
                    1.0
                } else {
                    0.0
                }
            });
        }
        PoolStrategy::Mean => {
            let n = contributing(&counts);
            broadcast(&mut grads.per_camera, &|cam, _, i, j| {
                if counts[(cam, i, j)] > 0 {
                    1.0 / n[(i, j)] as f64
                } else {
                    0.0
                }
            });
        }
        PoolStrategy::WeightedSum => {
            let w = params.require_weights()?;
            if w.dim() != per_camera.dim() {
                return Err(Error::shape("weights do not match features"));
            }
            broadcast(&mut grads.per_camera, &|cam, ch, i, j| w[(cam, ch, i, j)]);
            let mut gw = Array4::zeros(w.dim());
            broadcast(&mut gw, &|cam, ch, i, j| per_camera[(cam, ch, i, j)]);
            grads.weights = Some(gw);
        }
        PoolStrategy::PerCellSensor => {
            let w = params.require_cell_weights()?;
            if w.dim() != (k, nx, ny) {
                return Err(Error::shape("cell weights do not match features"));
            }
            broadcast(&mut grads.per_camera, &|cam, _, i, j| w[(cam, i, j)]);
            let mut gw = Array3::zeros((k, nx, ny));
            for cam in 0..k {
                for i in 0..nx {
                    for j in 0..ny {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += upstream[(ch, i, j)] * per_camera[(cam, ch, i, j)];
                        }
                        gw[(cam, i, j)] = acc;
                    }
                }
            }
            grads.cell_weights = Some(gw);
        }
        PoolStrategy::IntrinsicEmbed => {
            let e = params.require_embed()?;
            check_embed(&per_camera, e)?;
            let scales = e.scales();
            broadcast(&mut grads.per_camera, &|cam, ch, _, _| scales[(cam, ch)]);
            let mut ge = Array4::zeros((k, c, nx, ny));
            broadcast(&mut ge, &|_, _, _, _| 1.0);
            let mut gmu = Array2::zeros((k, c));
            let mut gscale = Array2::zeros((k, c));
            for cam in 0..k {
                for ch in 0..c {
                    let m = e.mu[(cam, ch)];
                    let mut up_sum = 0.0;
                    let mut centered = 0.0;
                    for i in 0..nx {
                        for j in 0..ny {
                            let g = upstream[(ch, i, j)];
                            up_sum += g;
                            centered += g * (per_camera[(cam, ch, i, j)] - m);
                        }
                    }
                    gmu[(cam, ch)] = -scales[(cam, ch)] * up_sum;
                    gscale[(cam, ch)] = centered;
                }
            }
            grads.map_weight = Some(gscale.t().dot(&e.descriptors));
            grads.map_bias = Some(gscale.sum_axis(Axis(0)));
            grads.embed = Some(ge);
            grads.mu = Some(gmu);
        }
    }
    Ok(grads)
}

/// Pooling with retained forward state for a later backward pass.
#[derive(Debug, Default)]
pub struct Pooler {
    retained: Option<(Array4<f64>, Array3<u32>)>,
}

impl Pooler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, grids: &CameraGrids, params: &PoolParams) -> Result<Array3<f64>> {
        let out = pool(grids.features.view(), grids.counts.view(), params)?;
        self.retained = Some((grids.features.clone(), grids.counts.clone()));
        Ok(out)
    }

    pub fn backward(&self, params: &PoolParams, upstream: ArrayView3<'_, f64>) -> Result<PoolGrads> {
        let (features, counts) = self
            .retained
            .as_ref()
            .ok_or_else(|| Error::Usage("pool backward called before forward".into()))?;
        pool_backward(features.view(), counts.view(), params, upstream)
    }
}
