//! Visibility-masked semantic cross-entropy, occlusion BCE and their sum.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::NUM_CLASSES;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// One weight per class id, including the invalid class at index 0.
    pub class_weights: Vec<f64>,
    /// Weight of the occlusion term in the total loss.
    pub lambda: f64,
    /// Probabilities are clamped to `[eps, 1 - eps]` before taking logs.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_weights: vec![1.0; NUM_CLASSES],
            lambda: 1.0,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    /// Vehicles 13, markings 3, street and background 1.
    pub fn weighted() -> Self {
        Self {
            class_weights: vec![1.0, 13.0, 3.0, 1.0, 1.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_weights.is_empty() || self.class_weights.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::config("class weights must be positive and finite"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.eps > 0.0 && self.eps <= 1e-3) {
            return Err(Error::config(format!("eps must lie in (0, 1e-3], got {}", self.eps)));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<G> {
    pub loss: f64,
    pub grad: G,
}

/// Per-cell softmax over the class axis of a `C x nx x ny` array.
pub fn softmax(logits: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut out = logits.to_owned();
    for mut lane in out.lanes_mut(Axis(0)) {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|v| (v - m).exp());
        let s = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    out
}

/// `-Σ v·α_gt·log p_gt / Σ v` over cells; the gradient is with respect to the
/// logits that produced `pred_prob` through a softmax.
///
/// Cells with zero visibility are skipped outright, so predictions there
/// cannot influence either the loss or its gradient.
pub fn semantic_loss(
    pred_prob: ArrayView3<'_, f64>,
    gt_class: ArrayView2<'_, u8>,
    visibility: ArrayView2<'_, f64>,
    cfg: &LossConfig,
) -> Result<LossValue<Array3<f64>>> {
    cfg.validate()?;
    let (c, nx, ny) = pred_prob.dim();
    if gt_class.dim() != (nx, ny) || visibility.dim() != (nx, ny) {
        return Err(Error::shape(format!(
            "prediction {:?}, labels {:?}, visibility {:?}",
            pred_prob.dim(),
            gt_class.dim(),
            visibility.dim()
        )));
    }
    if cfg.class_weights.len() != c {
        return Err(Error::config(format!("{} class weights for {c} classes", cfg.class_weights.len())));
    }
    if let Some(v) = visibility.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain(format!("visibility {v} outside [0, 1]")));
    }
    let mut grad = Array3::zeros((c, nx, ny));
    let norm: f64 = visibility.sum();
    if norm == 0.0 {
        return Ok(LossValue { loss: 0.0, grad });
    }
    let mut total = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            let v = visibility[(i, j)];
            if v == 0.0 {
                continue;
            }
            let gt = gt_class[(i, j)] as usize;
            if gt >= c {
                return Err(Error::Data(format!("class id {gt} at ({i}, {j}) with {c} classes")));
            }
            let lane = pred_prob.slice(ndarray::s![.., i, j]);
            let sum = lane.sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || lane.iter().any(|&p| p < -SIMPLEX_TOLERANCE) {
                return Err(Error::domain(format!("prediction at ({i}, {j}) is not a distribution (sum {sum})")));
            }
            let w = v * cfg.class_weights[gt] / norm;
            let p = lane[gt];
            total -= w * p.max(cfg.eps).ln();
            if p >= cfg.eps {
                for k in 0..c {
                    grad[(k, i, j)] = w * (lane[k] - if k == gt { 1.0 } else { 0.0 });
                }
            }
        }
    }
    Ok(LossValue { loss: total, grad })
}

/// [`semantic_loss`] on softmax of `logits`.
pub fn semantic_loss_from_logits(
    logits: ArrayView3<'_, f64>,
    gt_class: ArrayView2<'_, u8>,
    visibility: ArrayView2<'_, f64>,
    cfg: &LossConfig,
) -> Result<LossValue<Array3<f64>>> {
    semantic_loss(softmax(logits).view(), gt_class, visibility, cfg)
}

/// Which input [`occlusion_loss`] differentiates with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OccGradient {
    /// The probability itself.
    Probability,
    /// The logit feeding a logistic unit that produced the probability.
    #[default]
    Logit,
}

/// Mean binary cross-entropy over cells.
pub fn occlusion_loss(
    pred_occ: ArrayView2<'_, f64>,
    gt_occ: ArrayView2<'_, f64>,
    eps: f64,
    mode: OccGradient,
) -> Result<LossValue<Array2<f64>>> {
    if pred_occ.dim() != gt_occ.dim() {
        return Err(Error::shape(format!(
            "occlusion prediction {:?} vs labels {:?}",
            pred_occ.dim(),
            gt_occ.dim()
        )));
    }
    if let Some(g) = gt_occ.iter().find(|&&g| g != 0.0 && g != 1.0) {
        return Err(Error::domain(format!("occlusion label {g} is not 0 or 1")));
    }
    if let Some(p) = pred_occ.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::domain(format!("occlusion prediction {p} outside [0, 1]")));
    }
    let n = pred_occ.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred_occ.dim());
    ndarray::Zip::from(&mut grad)
        .and(&pred_occ)
        .and(&gt_occ)
        .for_each(|g, &p, &y| {
            let q = p.clamp(eps, 1.0 - eps);
            loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            *g = match mode {
                OccGradient::Logit => (p - y) / n,
                OccGradient::Probability if q == p => (p - y) / (p * (1.0 - p)) / n,
                OccGradient::Probability => 0.0,
            };
        });
    Ok(LossValue { loss: loss / n, grad })
}

/// `sem + λ·occ`
pub fn total_loss(sem: f64, occ: f64, lambda: f64) -> f64 {
    sem + lambda * occ
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(seed: u64) -> (Array3<f64>, Array2<u8>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Array3::from_shape_fn((5, 4, 4), |_| rng.random_range(-2.0..2.0));
        let gt = Array2::from_shape_fn((4, 4), |_| rng.random_range(0..5u8));
        let vis = Array2::from_shape_fn((4, 4), |(i, _)| if i == 0 { 0.0 } else { rng.random_range(0.0..1.0) });
        (logits, gt, vis)
    }

    #[test]
    fn zero_visibility_gives_zero() {
        let (logits, gt, _) = fixture(1);
        let vis = Array2::zeros((4, 4));
        let out = semantic_loss_from_logits(logits.view(), gt.view(), vis.view(), &LossConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn one_hot_and_uniform_predictions() {
        let gt = Array2::from_elem((3, 3), 2u8);
        let vis = Array2::ones((3, 3));
        let cfg = LossConfig::default();
        let mut onehot = Array3::zeros((5, 3, 3));
        onehot.slice_mut(s![2, .., ..]).fill(1.0);
        let out = semantic_loss(onehot.view(), gt.view(), vis.view(), &cfg).unwrap();
        assert!(out.loss <= -(1.0 - cfg.eps).ln());
        let uniform = Array3::from_elem((5, 3, 3), 0.2);
        let out = semantic_loss(uniform.view(), gt.view(), vis.view(), &cfg).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
        assert!((out.loss - 1.6094).abs() < 1e-4);
    }

    #[test]
    fn rejects_non_simplex_and_bad_ids() {
        let gt = Array2::zeros((2, 2));
        let vis = Array2::ones((2, 2));
        let bad = Array3::from_elem((5, 2, 2), 0.3);
        assert!(matches!(
            semantic_loss(bad.view(), gt.view(), vis.view(), &LossConfig::default()),
            Err(Error::Domain(_))
        ));
        let gt = Array2::from_elem((2, 2), 7u8);
        let ok = Array3::from_elem((5, 2, 2), 0.2);
        assert!(matches!(
            semantic_loss(ok.view(), gt.view(), vis.view(), &LossConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn semantic_gradient_matches_finite_differences() {
        let (logits, gt, vis) = fixture(2);
        let cfg = LossConfig::weighted();
        let f = |l: &Array3<f64>| semantic_loss_from_logits(l.view(), gt.view(), vis.view(), &cfg).unwrap().loss;
        let g = semantic_loss_from_logits(logits.view(), gt.view(), vis.view(), &cfg).unwrap().grad;
        let h = 1e-5;
        for (idx, &v) in logits.indexed_iter() {
            let mut p = logits.clone();
            p[idx] = v + h;
            let mut m = logits.clone();
            m[idx] = v - h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = g[idx];
            assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-4), "{idx:?}: {fd} vs {an}");
        }
    }

    #[test]
    fn masked_cells_are_inert_and_weights_scale() {
        let (logits, gt, vis) = fixture(3);
        let cfg = LossConfig::default();
        let base = semantic_loss_from_logits(logits.view(), gt.view(), vis.view(), &cfg).unwrap();
        let mut moved = logits.clone();
        moved.slice_mut(s![.., 0, ..]).mapv_inplace(|v| -3.0 * v + 1.0);
        let other = semantic_loss_from_logits(moved.view(), gt.view(), vis.view(), &cfg).unwrap();
        assert_eq!(base.loss, other.loss);
        assert_eq!(base.grad, other.grad);

        let scaled = LossConfig {
            class_weights: vec![2.0; 5],
            ..cfg.clone()
        };
        let doubled = semantic_loss_from_logits(logits.view(), gt.view(), vis.view(), &scaled).unwrap();
        assert_eq!(doubled.loss, 2.0 * base.loss);
    }

    #[test]
    fn bce_examples_and_gradients() {
        let out = occlusion_loss(
            ndarray::arr2(&[[0.5]]).view(),
            ndarray::arr2(&[[1.0]]).view(),
            1e-7,
            OccGradient::Probability,
        )
        .unwrap();
        assert!((out.loss - 0.5f64.ln().abs()).abs() < 1e-15);
        let near = occlusion_loss(
            ndarray::arr2(&[[1.0 - 1e-9, 1e-9]]).view(),
            ndarray::arr2(&[[1.0, 0.0]]).view(),
            1e-12,
            OccGradient::Logit,
        )
        .unwrap();
        assert!(near.loss < 1e-8);
        assert!(occlusion_loss(
            ndarray::arr2(&[[0.5]]).view(),
            ndarray::arr2(&[[0.5]]).view(),
            1e-7,
            OccGradient::Logit
        )
        .is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Array2::from_shape_fn((4, 4), |_| rng.random_range(-3.0..3.0));
        let gt = Array2::from_shape_fn((4, 4), |_| f64::from(rng.random_range(0..2u8)));
        let sig = |l: &Array2<f64>| l.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let h = 1e-5;
        let gp = occlusion_loss(sig(&logits).view(), gt.view(), 1e-7, OccGradient::Probability).unwrap().grad;
        let gl = occlusion_loss(sig(&logits).view(), gt.view(), 1e-7, OccGradient::Logit).unwrap().grad;
        let probs = sig(&logits);
        for (idx, &v) in logits.indexed_iter() {
            let loss_at = |x: f64| {
                let mut l = logits.clone();
                l[idx] = x;
                occlusion_loss(sig(&l).view(), gt.view(), 1e-7, OccGradient::Logit).unwrap().loss
            };
            let fd = (loss_at(v + h) - loss_at(v - h)) / (2.0 * h);
            assert!((fd - gl[idx]).abs() <= 1e-6 * fd.abs().max(gl[idx].abs()).max(1e-4));

            let p = probs[idx];
            let prob_loss = |x: f64| {
                let mut q = probs.clone();
                q[idx] = x;
                occlusion_loss(q.view(), gt.view(), 1e-7, OccGradient::Probability).unwrap().loss
            };
            let hp = 1e-7;
            let fd = (prob_loss(p + hp) - prob_loss(p - hp)) / (2.0 * hp);
            assert!((fd - gp[idx]).abs() <= 1e-6 * fd.abs().max(gp[idx].abs()));
        }
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.3, 7.0, 0.0), 1.3);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
        let (s, o, l, a) = (0.75, 1.25, 0.5, 4.0);
        assert_eq!(total_loss(a * s, a * o, l), a * total_loss(s, o, l));
    }
}
