//! Radial projection models mapping incidence angle to image-plane radius.
//!
//! Every model is expressed as a scalar function `r(theta)`; the azimuth is
//! carried through unchanged by the pinhole-free formulation used here. The
//! inverse `theta(r)` is either an explicit degree-9 polynomial supplied with
//! the calibration, or a safeguarded Newton solve of the forward model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of samples used for the construction-time monotonicity check.
const MONOTONIC_SAMPLES: usize = 1000;
/// Relative margin kept below `theta_max` when computing the largest radius.
pub const RANGE_MARGIN: f64 = 1e-6;
const NEWTON_MAX_ITERS: usize = 50;

/// Model family, independent of parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Polynomial,
    Ucm,
    Eucm,
    Rectilinear,
    Stereographic,
    DoubleSphere,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Polynomial,
        ModelKind::Ucm,
        ModelKind::Eucm,
        ModelKind::Rectilinear,
        ModelKind::Stereographic,
        ModelKind::DoubleSphere,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Polynomial => "polynomial",
            ModelKind::Ucm => "ucm",
            ModelKind::Eucm => "eucm",
            ModelKind::Rectilinear => "rectilinear",
            ModelKind::Stereographic => "stereographic",
            ModelKind::DoubleSphere => "double_sphere",
        }
    }

    /// Default maximum incidence angle: a hemisphere for the pinhole model,
    /// 1.9 rad for the fisheye-capable families.
    pub fn default_theta_max(self) -> f64 {
        match self {
            ModelKind::Rectilinear => std::f64::consts::FRAC_PI_2,
            _ => 1.9,
        }
    }

    /// Number of model-specific coefficients.
    pub fn coefficient_count(self) -> usize {
        match self {
            ModelKind::Polynomial => 4,
            ModelKind::Ucm => 1,
            ModelKind::Eucm | ModelKind::DoubleSphere => 2,
            ModelKind::Rectilinear | ModelKind::Stereographic => 0,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown model kind '{s}'")))
    }
}

/// Closed-form radial projection with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// `r = a1 θ + a2 θ² + a3 θ³ + a4 θ⁴` (coefficients already in pixels).
    Polynomial { a: [f64; 4] },
    /// `r = f sinθ / (cosθ + ξ)`
    Ucm { xi: f64 },
    /// `r = f sinθ / (cosθ + α(√(β sin²θ + cos²θ) − cosθ))`
    Eucm { alpha: f64, beta: f64 },
    /// `r = f tanθ`
    Rectilinear,
    /// `r = 2f tan(θ/2)`
    Stereographic,
    /// `r = f sinθ / (α√(sin²θ + (ξ + cosθ)²) + (1 − α)(ξ + cosθ))`
    DoubleSphere { xi: f64, alpha: f64 },
}

impl Projection {
    pub fn kind(&self) -> ModelKind {
        match self {
            Projection::Polynomial { .. } => ModelKind::Polynomial,
            Projection::Ucm { .. } => ModelKind::Ucm,
            Projection::Eucm { .. } => ModelKind::Eucm,
            Projection::Rectilinear => ModelKind::Rectilinear,
            Projection::Stereographic => ModelKind::Stereographic,
            Projection::DoubleSphere { .. } => ModelKind::DoubleSphere,
        }
    }

    /// Builds a projection from a kind and its flat coefficient list.
    pub fn from_coefficients(kind: ModelKind, coeffs: &[f64]) -> Result<Self> {
        if coeffs.len() != kind.coefficient_count() {
            return Err(Error::config(format!(
                "model '{}' takes {} coefficients, got {}",
                kind.name(),
                kind.coefficient_count(),
                coeffs.len()
            )));
        }
        Ok(match kind {
            ModelKind::Polynomial => Projection::Polynomial {
                a: [coeffs[0], coeffs[1], coeffs[2], coeffs[3]],
            },
            ModelKind::Ucm => Projection::Ucm { xi: coeffs[0] },
            ModelKind::Eucm => Projection::Eucm {
                alpha: coeffs[0],
                beta: coeffs[1],
            },
            ModelKind::Rectilinear => Projection::Rectilinear,
            ModelKind::Stereographic => Projection::Stereographic,
            ModelKind::DoubleSphere => Projection::DoubleSphere {
                xi: coeffs[0],
                alpha: coeffs[1],
            },
        })
    }

    pub fn coefficients(&self) -> Vec<f64> {
        match *self {
            Projection::Polynomial { a } => a.to_vec(),
            Projection::Ucm { xi } => vec![xi],
            Projection::Eucm { alpha, beta } => vec![alpha, beta],
            Projection::Rectilinear | Projection::Stereographic => Vec::new(),
            Projection::DoubleSphere { xi, alpha } => vec![xi, alpha],
        }
    }

    fn radius(&self, f: f64, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        match *self {
            Projection::Polynomial { a } => {
                theta * (a[0] + theta * (a[1] + theta * (a[2] + theta * a[3])))
            }
            Projection::Ucm { xi } => f * s / (c + xi),
            Projection::Eucm { alpha, beta } => {
                let q = (beta * s * s + c * c).sqrt();
                f * s / (c + alpha * (q - c))
            }
            Projection::Rectilinear => f * theta.tan(),
            Projection::Stereographic => 2.0 * f * (0.5 * theta).tan(),
            Projection::DoubleSphere { xi, alpha } => {
                let g = xi + c;
                let d = (s * s + g * g).sqrt();
                f * s / (alpha * d + (1.0 - alpha) * g)
            }
        }
    }

    fn derivative(&self, f: f64, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        match *self {
            Projection::Polynomial { a } => {
                a[0] + theta * (2.0 * a[1] + theta * (3.0 * a[2] + theta * 4.0 * a[3]))
            }
            Projection::Ucm { xi } => f * (1.0 + xi * c) / ((c + xi) * (c + xi)),
            Projection::Eucm { alpha, beta } => {
                let q = (beta * s * s + c * c).sqrt();
                let den = c + alpha * (q - c);
                let dden = -s + alpha * ((beta - 1.0) * s * c / q + s);
                f * (c * den - s * dden) / (den * den)
            }
            Projection::Rectilinear => f / (c * c),
            Projection::Stereographic => {
                let ch = (0.5 * theta).cos();
                f / (ch * ch)
            }
            Projection::DoubleSphere { xi, alpha } => {
                let g = xi + c;
                let d = (s * s + g * g).sqrt();
                let den = alpha * d + (1.0 - alpha) * g;
                let dd = -s * xi / d;
                let dden = alpha * dd - (1.0 - alpha) * s;
                f * (c * den - s * dden) / (den * den)
            }
        }
    }
}

/// A validated radial distortion model.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionModel {
    projection: Projection,
    f: f64,
    inverse_poly: Option<[f64; 9]>,
    theta_max: f64,
    r_max: f64,
}

impl DistortionModel {
    /// Validates `f`, `theta_max` and strict monotonicity of `r(θ)` on
    /// `[0, theta_max)`.
    pub fn new(projection: Projection, f: f64, theta_max: f64) -> Result<Self> {
        if !(f.is_finite() && f > 0.0) {
            return Err(Error::config(format!("focal length must be > 0, got {f}")));
        }
        if !(theta_max > 0.0 && theta_max <= std::f64::consts::PI) {
            return Err(Error::config(format!(
                "theta_max must lie in (0, pi], got {theta_max}"
            )));
        }
        for c in projection.coefficients() {
            if !c.is_finite() {
                return Err(Error::config("model coefficients must be finite"));
            }
        }
        let mut prev = projection.radius(f, 0.0);
        for i in 1..MONOTONIC_SAMPLES {
            let theta = theta_max * i as f64 / MONOTONIC_SAMPLES as f64;
            let r = projection.radius(f, theta);
            if !r.is_finite() || r <= prev {
                return Err(Error::config(format!(
                    "{} model is not strictly increasing at theta={theta:.6} (r={r}, previous {prev})",
                    projection.kind().name()
                )));
            }
            prev = r;
        }
        let r_max = projection.radius(f, theta_max * (1.0 - RANGE_MARGIN));
        if !r_max.is_finite() {
            return Err(Error::config("model radius diverges below theta_max"));
        }
        Ok(Self {
            projection,
            f,
            inverse_poly: None,
            theta_max,
            r_max,
        })
    }

    /// Convenience constructor using the kind's default `theta_max`.
    pub fn with_default_range(projection: Projection, f: f64) -> Result<Self> {
        Self::new(projection, f, projection.kind().default_theta_max())
    }

    /// Attaches a direct inverse `θ(r) = p1 r + … + p9 r⁹` after checking that
    /// `r(θ(r))` stays within `tolerance` pixels over the valid radius range.
    pub fn with_inverse_poly(mut self, p: [f64; 9], tolerance: f64) -> Result<Self> {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("inverse polynomial coefficients must be finite"));
        }
        let n = MONOTONIC_SAMPLES;
        let mut worst = 0.0_f64;
        for i in 0..=n {
            let r = self.r_max * i as f64 / n as f64;
            let theta = eval_inverse_poly(&p, r);
            if !(0.0..self.theta_max).contains(&theta) {
                return Err(Error::config(format!(
                    "inverse polynomial maps r={r:.4} to theta={theta:.6}, outside [0, {})",
                    self.theta_max
                )));
            }
            worst = worst.max((self.projection.radius(self.f, theta) - r).abs());
        }
        if worst > tolerance {
            return Err(Error::config(format!(
                "inverse polynomial disagrees with forward model by {worst:.3e} px (tolerance {tolerance:.3e})"
            )));
        }
        self.inverse_poly = Some(p);
        Ok(self)
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn kind(&self) -> ModelKind {
        self.projection.kind()
    }

    pub fn focal(&self) -> f64 {
        self.f
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    /// Largest radius accepted by [`inverse_distort`](Self::inverse_distort).
    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn inverse_poly(&self) -> Option<&[f64; 9]> {
        self.inverse_poly.as_ref()
    }

    /// Forward radial mapping `θ → r`.
    pub fn forward_distort(&self, theta: f64) -> Result<f64> {
        if !(0.0..self.theta_max).contains(&theta) {
            return Err(Error::domain(format!(
                "theta {theta} outside [0, theta_max={})",
                self.theta_max
            )));
        }
        Ok(self.projection.radius(self.f, theta))
    }

    /// `dr/dθ`, used by the Newton solver and by tests.
    pub fn forward_derivative(&self, theta: f64) -> f64 {
        self.projection.derivative(self.f, theta)
    }

    /// Inverse radial mapping `r → θ`. Uses the attached inverse polynomial
    /// when present, otherwise a Newton solve.
    pub fn inverse_distort(&self, r: f64) -> Result<f64> {
        self.check_radius(r)?;
        match &self.inverse_poly {
            Some(p) => Ok(eval_inverse_poly(p, r).clamp(0.0, self.theta_max * (1.0 - RANGE_MARGIN))),
            None => self.solve_theta(r),
        }
    }

    /// Always solves the forward model numerically, ignoring any attached
    /// inverse polynomial.
    pub fn inverse_distort_numeric(&self, r: f64) -> Result<f64> {
        self.check_radius(r)?;
        self.solve_theta(r)
    }

    fn check_radius(&self, r: f64) -> Result<()> {
        if !(r >= 0.0) {
            return Err(Error::domain(format!("radius must be >= 0, got {r}")));
        }
        if r > self.r_max {
            return Err(Error::OutOfImage { r, r_max: self.r_max });
        }
        Ok(())
    }

    /// Safeguarded Newton iteration on `r(θ) − r = 0` with a bisection
    /// fallback whenever a step leaves the bracket.
    fn solve_theta(&self, r: f64) -> Result<f64> {
        if r == 0.0 {
            return Ok(0.0);
        }
        let tol = 1e-10 * r.max(1.0);
        let mut lo = 0.0;
        let mut hi = self.theta_max * (1.0 - RANGE_MARGIN);
        let mut theta = hi * (r / self.r_max);
        let mut residual = f64::INFINITY;
        for _ in 0..NEWTON_MAX_ITERS {
            residual = self.projection.radius(self.f, theta) - r;
            if residual.abs() <= tol {
                return Ok(self.polish(theta, r, residual, lo, hi));
            }
            if residual < 0.0 {
                lo = theta;
            } else {
                hi = theta;
            }
            let slope = self.projection.derivative(self.f, theta);
            let step = theta - residual / slope;
            theta = if slope > 0.0 && step > lo && step < hi {
                step
            } else {
                0.5 * (lo + hi)
            };
        }
        Err(Error::Numeric {
            message: format!("Newton inversion did not converge for r={r}"),
            residual: residual.abs(),
        })
    }

    // One extra Newton step once inside tolerance, kept only if it helps.
    fn polish(&self, theta: f64, r: f64, residual: f64, lo: f64, hi: f64) -> f64 {
        let slope = self.projection.derivative(self.f, theta);
        if slope <= 0.0 {
            return theta;
        }
        let next = theta - residual / slope;
        if next < lo || next > hi {
            return theta;
        }
        let next_residual = self.projection.radius(self.f, next) - r;
        if next_residual.abs() < residual.abs() {
            next
        } else {
            theta
        }
    }

    /// Least-squares fit of the nine inverse polynomial coefficients against
    /// the forward model, sampled on `samples` angles over `[0, 0.999·theta_max]`.
    pub fn fit_inverse_poly(&self, samples: usize) -> Result<[f64; 9]> {
        if samples < 9 {
            return Err(Error::config("need at least 9 samples to fit the inverse polynomial"));
        }
        // Fit in a normalized radius to keep the Vandermonde system conditioned.
        let scale = self.r_max;
        let mut a = DMatrix::<f64>::zeros(samples, 9);
        let mut b = DVector::<f64>::zeros(samples);
        for i in 0..samples {
            let theta = 0.999 * self.theta_max * i as f64 / (samples - 1) as f64;
            let x = self.projection.radius(self.f, theta) / scale;
            let mut pw = x;
            for k in 0..9 {
                a[(i, k)] = pw;
                pw *= x;
            }
            b[i] = theta;
        }
        let sol = a
            .svd(true, true)
            .solve(&b, 1e-14)
            .map_err(|e| Error::Numeric {
                message: format!("inverse polynomial fit failed: {e}"),
                residual: f64::NAN,
            })?;
        let mut p = [0.0; 9];
        let mut s = scale;
        for k in 0..9 {
            p[k] = sol[k] / s;
            s *= scale;
        }
        Ok(p)
    }

    /// Scale-free parameter vector describing this model (see
    /// [`CameraIntrinsics::descriptor`](super::CameraIntrinsics::descriptor)).
    pub(crate) fn coefficient_descriptor(&self, width: f64) -> [f64; 4] {
        let mut out = [0.0; 4];
        match self.projection {
            Projection::Polynomial { a } => {
                for (o, c) in out.iter_mut().zip(a) {
                    *o = c / width;
                }
            }
            other => {
                for (o, c) in out.iter_mut().zip(other.coefficients()) {
                    *o = c;
                }
            }
        }
        out
    }
}

pub(crate) fn eval_inverse_poly(p: &[f64; 9], r: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| (acc + c) * r)
}
