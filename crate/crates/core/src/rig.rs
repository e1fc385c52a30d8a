//! Fisheye camera models, rig calibration and the world-to-pixel projection.
//!
//! Frames:
//! * rig/world: right-handed, x forward (azimuth 0), y up, z right.
//! * camera: optical axis +z, x along increasing image column, y along
//!   increasing image row.
//!
//! The lens is an equidistant fisheye with an odd-polynomial radial profile
//! `r(theta) = k1*theta + k2*theta^3 + ...`, which handles fields of view
//! beyond 180 degrees.

use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for orthonormality and determinant checks on rotations.
pub const ROTATION_TOL: f64 = 1e-9;
/// Camera centres must lie in the rig x-z plane within this distance (m).
pub const PLANE_TOL_M: f64 = 1e-6;
/// Calibration schema version written and accepted by [`load_rig`].
pub const CALIBRATION_VERSION: u32 = 1;
/// Model tag recorded in calibration files.
pub const MODEL_NAME: &str = "equidistant-odd-poly";

#[derive(Debug, Clone, PartialEq)]
pub struct FisheyeIntrinsics {
    /// `k_1..k_m`; `k_j` multiplies `theta^(2j-1)` (pixels per radian^(2j-1)).
    pub focal_poly: Vec<f64>,
    /// `(u0, v0)` in pixels, u along columns.
    pub principal_point: (f64, f64),
    /// `(rows, cols)` in pixels.
    pub image_size: (usize, usize),
    pub fov_deg: f64,
}

impl FisheyeIntrinsics {
    /// Validated constructor. `camera` is only used in error messages.
    pub fn new(
        focal_poly: Vec<f64>,
        principal_point: (f64, f64),
        image_size: (usize, usize),
        fov_deg: f64,
        camera: usize,
    ) -> Result<Self> {
        let intr = Self {
            focal_poly,
            principal_point,
            image_size,
            fov_deg,
        };
        intr.validate(camera)?;
        Ok(intr)
    }

    pub fn validate(&self, camera: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidIntrinsics { camera, reason };
        if !(self.fov_deg > 0.0 && self.fov_deg < 360.0) {
            return Err(bad(format!("fov_deg {} outside (0, 360)", self.fov_deg)));
        }
        if self.focal_poly.is_empty() || self.focal_poly.iter().any(|k| !k.is_finite()) {
            return Err(bad("focal polynomial must be non-empty and finite".into()));
        }
        if self.focal_poly[0] <= 0.0 {
            return Err(Error::NonMonotoneFocal {
                camera,
                theta_deg: 0.0,
            });
        }
        let (rows, cols) = self.image_size;
        if rows == 0 || cols == 0 {
            return Err(bad("empty image size".into()));
        }
        let (u0, v0) = self.principal_point;
        if !(u0 >= 0.0 && u0 <= (cols - 1) as f64 && v0 >= 0.0 && v0 <= (rows - 1) as f64) {
            return Err(bad(format!(
                "principal point ({u0}, {v0}) outside {cols}x{rows} image"
            )));
        }
        // Strictly increasing at 1 degree steps over [0, fov/2], endpoint included.
        let half = 0.5 * self.fov_deg;
        let steps = half.ceil() as usize;
        let mut prev = self.radius(0.0);
        for s in 1..=steps {
            let deg = (s as f64).min(half);
            let r = self.radius(deg.to_radians());
            if r <= prev {
                return Err(Error::NonMonotoneFocal {
                    camera,
                    theta_deg: deg,
                });
            }
            prev = r;
        }
        Ok(())
    }

    pub fn half_fov(&self) -> f64 {
        0.5 * self.fov_deg.to_radians()
    }

    /// Radial image distance (px) for incidence angle `theta` (rad).
    pub fn radius(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let mut pow = theta;
        let mut r = 0.0;
        for k in &self.focal_poly {
            r += k * pow;
            pow *= t2;
        }
        r
    }

    /// `dr/dtheta`.
    pub fn radius_slope(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let mut pow = 1.0;
        let mut dr = 0.0;
        for (j, k) in self.focal_poly.iter().enumerate() {
            dr += (2 * j + 1) as f64 * k * pow;
            pow *= t2;
        }
        dr
    }

    /// Largest `dr/dtheta` over the field of view, sampled at 0.1 degree.
    pub fn max_radius_slope(&self) -> f64 {
        let half = self.half_fov();
        (0..=1000)
            .map(|i| self.radius_slope(half * i as f64 / 1000.0))
            .fold(0.0, f64::max)
    }

    /// Inverts `r(theta)` on `[0, fov/2]`. `None` when `r` is out of range.
    pub fn incidence_for_radius(&self, r: f64) -> Option<f64> {
        let half = self.half_fov();
        if !(r >= 0.0) || r > self.radius(half) {
            return None;
        }
        let (mut lo, mut hi) = (0.0, half);
        let mut theta = (r / self.focal_poly[0]).clamp(lo, hi);
        for _ in 0..100 {
            let f = self.radius(theta) - r;
            if f.abs() < 1e-13 * (1.0 + r) {
                break;
            }
            if f > 0.0 {
                hi = theta;
            } else {
                lo = theta;
            }
            let step = f / self.radius_slope(theta);
            let next = theta - step;
            theta = if next > lo && next < hi {
                next
            } else {
                0.5 * (lo + hi)
            };
        }
        Some(theta)
    }

    /// Whether pixel `(u, v)` sees a ray within the field of view.
    #[inline]
    pub fn pixel_in_fov(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.principal_point.0, v - self.principal_point.1);
        let r_max = self.radius(self.half_fov());
        du * du + dv * dv <= r_max * r_max
    }

    /// Intrinsics for a feature map downsampled by `scale` with box pooling.
    ///
    /// The polynomial shrinks by `1/scale`; the principal point keeps
    /// pixel-centre alignment, `(p + 0.5) / scale - 0.5`.
    pub fn scaled(&self, scale: usize) -> Self {
        let s = scale as f64;
        let (u0, v0) = self.principal_point;
        Self {
            focal_poly: self.focal_poly.iter().map(|k| k / s).collect(),
            principal_point: ((u0 + 0.5) / s - 0.5, (v0 + 0.5) / s - 0.5),
            image_size: (self.image_size.0 / scale, self.image_size.1 / scale),
            fov_deg: self.fov_deg,
        }
    }
}

/// World-to-camera rigid transform, `P_cam = R * P + T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, camera: usize) -> Result<Self> {
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho_err <= ROTATION_TOL) {
            return Err(Error::ImproperRotation {
                camera,
                reason: format!("R^T R deviates from identity by {ortho_err:e}"),
            });
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::ImproperRotation {
                camera,
                reason: format!("determinant {det}"),
            });
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidRig(format!(
                "camera {camera}: non-finite translation"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Camera looking along rig azimuth `yaw` (rad) with its optical centre at
    /// `center` (rig frame), image rows pointing down.
    pub fn facing_yaw(yaw: f64, center: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(-s, 0.0, c, 0.0, -1.0, 0.0, c, 0.0, s);
        let translation = -(rotation * center);
        Self {
            rotation,
            translation,
        }
    }

    /// Optical centre in the rig frame, `-R^T T`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis expressed in the rig frame.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// Azimuth of the optical axis (rad), in `(-pi, pi]`.
    pub fn yaw(&self) -> f64 {
        let axis = self.optical_axis();
        axis.z.atan2(axis.x)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: FisheyeIntrinsics,
    pub extrinsics: Extrinsics,
}

/// Result of projecting a camera-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// `(u, v)`: column, row.
    pub pixel: Vector2<f64>,
    /// Incidence angle within half the field of view.
    pub valid: bool,
}

impl Camera {
    pub fn project_world(&self, p: &Vector3<f64>) -> Projection {
        project_fisheye(&world_to_camera(p, &self.extrinsics), &self.intrinsics)
    }
}

/// Four-camera rig. Index 0..3 here corresponds to cameras 1..4, in azimuth
/// order; cameras `i` and `i + 2` are back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: [Camera; 4],
}

impl CameraRig {
    pub fn new(cameras: [Camera; 4]) -> Result<Self> {
        let rig = Self { cameras };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, cam) in self.cameras.iter().enumerate() {
            cam.intrinsics.validate(i + 1)?;
            Extrinsics::new(cam.extrinsics.rotation, cam.extrinsics.translation, i + 1)?;
            let c = cam.extrinsics.center();
            if c.y.abs() > PLANE_TOL_M {
                return Err(Error::InvalidRig(format!(
                    "camera {} centre is {} m off the x-z plane",
                    i + 1,
                    c.y
                )));
            }
        }
        for i in 0..2 {
            let a = self.cameras[i].extrinsics.optical_axis();
            let b = self.cameras[i + 2].extrinsics.optical_axis();
            if a.dot(&b) > -(1.0 - 1e-6) {
                return Err(Error::InvalidRig(format!(
                    "cameras {} and {} are not back to back",
                    i + 1,
                    i + 3
                )));
            }
        }
        for i in 0..4 {
            let step = wrap_angle(self.yaw(i + 1) - self.yaw(i));
            if !(step > 0.0 && step < std::f64::consts::PI) {
                return Err(Error::InvalidRig(format!(
                    "cameras {} and {} are not in increasing azimuth order",
                    i + 1,
                    (i + 1) % 4 + 1
                )));
            }
        }
        Ok(())
    }

    /// Azimuth of camera `i` (0-based, taken mod 4).
    pub fn yaw(&self, i: usize) -> f64 {
        self.cameras[i % 4].extrinsics.yaw()
    }

    /// Cardinal rig: camera `i` faces azimuth `i * 90 deg` and sits at the
    /// square corner `half_side * (cos a - sin a, 0, sin a + cos a)`.
    pub fn cardinal(intrinsics: FisheyeIntrinsics, half_side_m: f64) -> Result<Self> {
        let cameras = std::array::from_fn(|i| {
            let yaw = i as f64 * std::f64::consts::FRAC_PI_2;
            let (s, c) = yaw.sin_cos();
            let center = half_side_m * Vector3::new(c - s, 0.0, s + c);
            Camera {
                intrinsics: intrinsics.clone(),
                extrinsics: Extrinsics::facing_yaw(yaw, center),
            }
        });
        Self::new(cameras)
    }

    pub fn max_translation(&self) -> f64 {
        self.cameras
            .iter()
            .map(|c| c.extrinsics.translation.norm())
            .fold(0.0, f64::max)
    }

    pub fn to_calibration_text(&self) -> String {
        let doc = CalibrationDoc {
            version: CALIBRATION_VERSION,
            model: MODEL_NAME.to_string(),
            cameras: self
                .cameras
                .iter()
                .map(|cam| {
                    let q = cam.extrinsics.quaternion();
                    let t = cam.extrinsics.translation;
                    let i = &cam.intrinsics;
                    CameraDoc {
                        rotation_quaternion: Some([q.w, q.i, q.j, q.k]),
                        rotation_matrix: None,
                        translation_m: [t.x, t.y, t.z],
                        focal_poly: i.focal_poly.clone(),
                        principal_point_px: [i.principal_point.0, i.principal_point.1],
                        image_size: [i.image_size.0, i.image_size.1],
                        fov_deg: i.fov_deg,
                    }
                })
                .collect(),
        };
        toml::to_string(&doc).expect("calibration document serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_calibration_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        load_rig(&text)
    }
}

fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let w = a.rem_euclid(tau);
    if w > std::f64::consts::PI {
        w - tau
    } else {
        w
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationDoc {
    version: u32,
    model: String,
    cameras: Vec<CameraDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraDoc {
    /// `(w, x, y, z)`, unit norm.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    rotation_quaternion: Option<[f64; 4]>,
    /// Row-major alternative to the quaternion.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    rotation_matrix: Option<[[f64; 3]; 3]>,
    translation_m: [f64; 3],
    focal_poly: Vec<f64>,
    principal_point_px: [f64; 2],
    /// `(rows, cols)`.
    image_size: [usize; 2],
    fov_deg: f64,
}

/// Parses and validates a calibration document (TOML, see README for the
/// schema).
pub fn load_rig(calibration_text: &str) -> Result<CameraRig> {
    let doc: CalibrationDoc =
        toml::from_str(calibration_text).map_err(|e| Error::CalibrationParse(e.to_string()))?;
    if doc.version != CALIBRATION_VERSION {
        return Err(Error::CalibrationVersion {
            found: doc.version,
            expected: CALIBRATION_VERSION,
        });
    }
    if doc.model != MODEL_NAME {
        return Err(Error::CalibrationParse(format!(
            "unsupported camera model {:?}",
            doc.model
        )));
    }
    if doc.cameras.len() != 4 {
        return Err(Error::CalibrationParse(format!(
            "expected 4 cameras, found {}",
            doc.cameras.len()
        )));
    }
    let mut cams = Vec::with_capacity(4);
    for (i, c) in doc.cameras.into_iter().enumerate() {
        let camera = i + 1;
        let rotation = match (c.rotation_quaternion, c.rotation_matrix) {
            (Some([w, x, y, z]), None) => {
                let q = Quaternion::new(w, x, y, z);
                let norm = q.norm();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::ImproperRotation {
                        camera,
                        reason: format!("quaternion norm {norm}"),
                    });
                }
                UnitQuaternion::from_quaternion(q)
                    .to_rotation_matrix()
                    .into_inner()
            }
            (None, Some(m)) => Matrix3::from_fn(|r, col| m[r][col]),
            _ => {
                return Err(Error::CalibrationParse(format!(
                    "camera {camera}: exactly one of rotation_quaternion, rotation_matrix required"
                )))
            }
        };
        let t = c.translation_m;
        let extrinsics = Extrinsics::new(rotation, Vector3::new(t[0], t[1], t[2]), camera)?;
        let intrinsics = FisheyeIntrinsics::new(
            c.focal_poly,
            (c.principal_point_px[0], c.principal_point_px[1]),
            (c.image_size[0], c.image_size[1]),
            c.fov_deg,
            camera,
        )?;
        cams.push(Camera {
            intrinsics,
            extrinsics,
        });
    }
    let cameras: [Camera; 4] = cams.try_into().expect("four cameras");
    CameraRig::new(cameras)
}

/// `R * P + T`.
#[inline]
pub fn world_to_camera(p: &Vector3<f64>, ext: &Extrinsics) -> Vector3<f64> {
    ext.rotation * p + ext.translation
}

/// Projects a camera-frame point onto the fisheye image.
#[inline]
pub fn project_fisheye(p_cam: &Vector3<f64>, intr: &FisheyeIntrinsics) -> Projection {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let rho = x.hypot(y);
    let theta = rho.atan2(z);
    let (u0, v0) = intr.principal_point;
    let valid = theta <= intr.half_fov();
    if rho == 0.0 {
        return Projection {
            pixel: Vector2::new(u0, v0),
            valid: valid && z > 0.0,
        };
    }
    let r = intr.radius(theta);
    Projection {
        pixel: Vector2::new(u0 + r * x / rho, v0 + r * y / rho),
        valid,
    }
}

/// `d(u, v) / d(P_cam)` in pixels per metre.
///
/// Near the optical axis (`rho < 1e-12 |P|`) the analytic limit
/// `[[k1/z, 0, 0], [0, k1/z, 0]]` is returned.
pub fn project_fisheye_jacobian(p_cam: &Vector3<f64>, intr: &FisheyeIntrinsics) -> Matrix2x3<f64> {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let rho2 = x * x + y * y;
    let rho = rho2.sqrt();
    let n2 = rho2 + z * z;
    if rho <= 1e-12 * n2.sqrt() {
        let k1 = intr.focal_poly[0];
        return Matrix2x3::new(k1 / z, 0.0, 0.0, 0.0, k1 / z, 0.0);
    }
    let theta = rho.atan2(z);
    let r = intr.radius(theta);
    let dr = intr.radius_slope(theta);
    let rho3 = rho2 * rho;
    let a = dr * z / (rho2 * n2);
    let b = r / rho3;
    Matrix2x3::new(
        a * x * x + b * y * y,
        (a - b) * x * y,
        -dr * x / n2,
        (a - b) * x * y,
        a * y * y + b * x * x,
        -dr * y / n2,
    )
}

/// Unit camera-frame ray through `pixel`, or `None` outside the field of view.
pub fn backproject_fisheye(pixel: &Vector2<f64>, intr: &FisheyeIntrinsics) -> Option<Vector3<f64>> {
    let (u0, v0) = intr.principal_point;
    let dx = pixel.x - u0;
    let dy = pixel.y - v0;
    let r = dx.hypot(dy);
    let theta = intr.incidence_for_radius(r)?;
    if r == 0.0 {
        return Some(Vector3::z());
    }
    let (s, c) = theta.sin_cos();
    Some(Vector3::new(s * dx / r, s * dy / r, c))
}
