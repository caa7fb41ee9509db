//! Camera geometry: radial projection models, intrinsics, extrinsics and the
//! cylindrical rectification baseline.
//!
//! Frames: the camera frame has `z` along the optical axis, `x` to the right
//! and `y` down, so pixel `u` grows with `x` and `v` with `y`. The vehicle
//! frame has `x` forward, `y` left and `z` up with the ground at `z = 0`.
//! Continuous pixel coordinates place the center of pixel `(row i, col j)`
//! at `(j + 0.5, i + 0.5)`.

mod model;
mod rectify;

pub use model::{DistortionModel, ModelKind, Projection, RANGE_MARGIN};
pub use rectify::{cylindrical_rectify, CylinderCamera, CylinderConfig, Rectified, Sampling};

use nalgebra::{Matrix3, Point2, Vector3};

use crate::error::{Error, Result};

/// Length of [`CameraIntrinsics::descriptor`].
pub const DESCRIPTOR_LEN: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub model: DistortionModel,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(model: DistortionModel, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::config("image size must be at least 1x1"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::config(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { model, cx, cy, width, height })
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= self.width as f64 && v <= self.height as f64
    }

    /// Unit viewing ray for a pixel: `(cosφ sinθ, sinφ sinθ, cosθ)`.
    pub fn pixel_to_ray(&self, u: f64, v: f64) -> Result<Vector3<f64>> {
        if !self.contains(u, v) {
            return Err(Error::domain(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let x = u - self.cx;
        let y = v - self.cy;
        let r = x.hypot(y);
        let theta = match self.model.inverse_distort(r) {
            Ok(t) => t,
            Err(Error::OutOfImage { r, r_max }) => {
                return Err(Error::OutOfFov(format!(
                    "pixel ({u}, {v}) has radius {r:.3} beyond {r_max:.3}"
                )))
            }
            Err(e) => return Err(e),
        };
        let phi = y.atan2(x);
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Ok(Vector3::new(cp * st, sp * st, ct))
    }

    /// Projects a camera-frame direction. `Ok(None)` signals a ray outside
    /// the model's angular range; the returned pixel may still fall outside
    /// the image rectangle, which callers check with [`contains`](Self::contains).
    pub fn ray_to_pixel(&self, dir: &Vector3<f64>) -> Result<Option<Point2<f64>>> {
        let rho = dir.x.hypot(dir.y);
        if rho == 0.0 && dir.z == 0.0 {
            return Err(Error::domain("cannot project a zero direction"));
        }
        let theta = rho.atan2(dir.z);
        if theta >= self.model.theta_max() {
            return Ok(None);
        }
        let r = self.model.forward_distort(theta)?;
        if rho == 0.0 {
            return Ok(Some(Point2::new(self.cx, self.cy)));
        }
        Ok(Some(Point2::new(
            self.cx + r * dir.x / rho,
            self.cy + r * dir.y / rho,
        )))
    }

    /// Normalized intrinsic parameter vector used to condition pooling:
    /// `[f/width, cx/width, cy/height, c1..c4]` with polynomial coefficients
    /// divided by the image width and unused slots zero.
    pub fn descriptor(&self) -> [f64; DESCRIPTOR_LEN] {
        let w = self.width as f64;
        let mut d = [0.0; DESCRIPTOR_LEN];
        d[0] = self.model.focal() / w;
        d[1] = self.cx / w;
        d[2] = self.cy / self.height as f64;
        d[3..].copy_from_slice(&self.model.coefficient_descriptor(w));
        d
    }
}

/// Camera pose: maps camera-frame points into the vehicle frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraExtrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 {
            return Err(Error::config(format!(
                "rotation is not orthonormal (max deviation {ortho:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("rotation determinant is {det}, expected +1")));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("translation must be finite"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose of a camera at `position` whose optical axis points along
    /// `yaw` (radians, counter-clockwise from vehicle `+x`) tilted down by
    /// `pitch_down`, with image rows pointing down-ish.
    pub fn looking(yaw: f64, pitch_down: f64, position: Vector3<f64>) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch_down.sin_cos();
        let z = Vector3::new(cy * cp, sy * cp, -sp);
        let x = Vector3::new(sy, -cy, 0.0);
        let y = z.cross(&x);
        Self {
            rotation: Matrix3::from_columns(&[x, y, z]),
            translation: position,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn with_translation(&self, translation: Vector3<f64>) -> Self {
        Self {
            rotation: self.rotation,
            translation,
        }
    }

    pub fn camera_to_vehicle(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn vehicle_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn direction_to_vehicle(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl Camera {
    /// Projects a vehicle-frame point to a pixel inside the image, if any.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Point2<f64>> {
        let local = self.extrinsics.vehicle_to_camera(p);
        match self.intrinsics.ray_to_pixel(&local) {
            Ok(Some(px)) if self.intrinsics.contains(px.x, px.y) => Some(px),
            _ => None,
        }
    }
}

/// Parameter sets used across tests and benchmarks.
pub mod fixtures {
    use super::*;

    /// A representative, strictly monotone model of each kind with a focal
    /// length of 150 px and the kind's default angular range.
    pub fn model(kind: ModelKind) -> DistortionModel {
        let projection = match kind {
            ModelKind::Polynomial => Projection::Polynomial { a: [150.0, 0.0, -3.0, 0.4] },
            ModelKind::Ucm => Projection::Ucm { xi: 0.9 },
            ModelKind::Eucm => Projection::Eucm { alpha: 0.6, beta: 1.1 },
            ModelKind::Rectilinear => Projection::Rectilinear,
            ModelKind::Stereographic => Projection::Stereographic,
            ModelKind::DoubleSphere => Projection::DoubleSphere { xi: -0.2, alpha: 0.6 },
        };
        DistortionModel::with_default_range(projection, 150.0).expect("fixture model is valid")
    }

    /// A 480x302 camera with principal point at the image center.
    pub fn intrinsics(kind: ModelKind) -> CameraIntrinsics {
        CameraIntrinsics::new(model(kind), 240.0, 151.0, 480, 302).expect("fixture intrinsics")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn principal_point_is_optical_axis() {
        for kind in ModelKind::ALL {
            let intr = fixtures::intrinsics(kind);
            let ray = intr.pixel_to_ray(intr.cx, intr.cy).unwrap();
            assert_eq!(ray, Vector3::new(0.0, 0.0, 1.0));
            let px = intr.ray_to_pixel(&Vector3::new(0.0, 0.0, 1.0)).unwrap().unwrap();
            assert_eq!((px.x, px.y), (intr.cx, intr.cy));
        }
    }

    #[test]
    fn rectilinear_45_degrees() {
        let model = DistortionModel::with_default_range(Projection::Rectilinear, 100.0).unwrap();
        let intr = CameraIntrinsics::new(model, 200.0, 150.0, 400, 300).unwrap();
        let ray = intr.pixel_to_ray(300.0, 150.0).unwrap();
        let expected = Vector3::new(FRAC_PI_4.sin(), 0.0, FRAC_PI_4.cos());
        assert!((ray - expected).norm() < 1e-12);
    }

    #[test]
    fn behind_camera_is_out_of_fov() {
        let intr = fixtures::intrinsics(ModelKind::Rectilinear);
        assert_eq!(intr.ray_to_pixel(&Vector3::new(0.0, 0.0, -1.0)).unwrap(), None);
        assert!(intr.ray_to_pixel(&Vector3::zeros()).is_err());
    }

    #[test]
    fn corner_pixel_beyond_range_is_out_of_fov() {
        let model = DistortionModel::new(Projection::Polynomial { a: [150.0, 0.0, 0.0, 0.0] }, 150.0, 1.0)
            .unwrap();
        let intr = CameraIntrinsics::new(model, 240.0, 151.0, 480, 302).unwrap();
        assert!(matches!(intr.pixel_to_ray(0.0, 0.0), Err(Error::OutOfFov(_))));
        assert!(matches!(intr.pixel_to_ray(-1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn intrinsics_validation() {
        let m = fixtures::model(ModelKind::Stereographic);
        assert!(CameraIntrinsics::new(m.clone(), 480.0, 10.0, 480, 302).is_err());
        assert!(CameraIntrinsics::new(m.clone(), 10.0, -1.0, 480, 302).is_err());
        assert!(CameraIntrinsics::new(m, 0.0, 0.0, 0, 302).is_err());
    }

    #[test]
    fn extrinsics_validation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0;
        assert!(CameraExtrinsics::new(r, Vector3::zeros()).is_err());
        assert!(CameraExtrinsics::new(Matrix3::identity() * 1.001, Vector3::zeros()).is_err());
        let pose = CameraExtrinsics::looking(0.7, 0.3, Vector3::new(1.0, 0.0, 2.0));
        CameraExtrinsics::new(*pose.rotation(), *pose.translation()).unwrap();
    }

    #[test]
    fn looking_pose_axes() {
        let pose = CameraExtrinsics::looking(0.0, 0.0, Vector3::zeros());
        let fwd = pose.direction_to_vehicle(&Vector3::new(0.0, 0.0, 1.0));
        let down = pose.direction_to_vehicle(&Vector3::new(0.0, 1.0, 0.0));
        let right = pose.direction_to_vehicle(&Vector3::new(1.0, 0.0, 0.0));
        assert!((fwd - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!((down - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        assert!((right - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
        let p = Vector3::new(0.3, -2.0, 1.5);
        let q = pose.with_translation(Vector3::new(1.0, 2.0, 3.0));
        assert!((q.vehicle_to_camera(&q.camera_to_vehicle(&p)) - p).norm() < 1e-12);
    }

    #[test]
    fn descriptor_layout() {
        let intr = fixtures::intrinsics(ModelKind::DoubleSphere);
        let d = intr.descriptor();
        assert_eq!(d[0], 150.0 / 480.0);
        assert_eq!(d[1], 0.5);
        assert_eq!(d[2], 0.5);
        assert_eq!(&d[3..], &[-0.2, 0.6, 0.0, 0.0]);
    }
}
