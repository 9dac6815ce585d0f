//! Equidistant fisheye camera model and rig calibration files.
//!
//! A point `p` in the inertial frame maps to the camera frame as
//! `pc = R p + t`. With `a = X/Z`, `b = Y/Z`, `r = √(a² + b²)` and
//! `θ = atan(r)`, the distorted angle is
//! `θd = θ (1 + k1 θ² + k2 θ⁴ + k3 θ⁶ + k4 θ⁸)` and the pixel is
//! `u = fx (θd / r) a + cx`, `v = fy (θd / r) b + cy`.

use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this radius the distortion scale uses its series expansion.
const SMALL_RADIUS: f64 = 1e-8;
const UNDISTORT_MAX_ITERS: usize = 20;
const UNDISTORT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub id: u32,
    pub resolution: (u32, u32),
    pub focal: (f64, f64),
    pub principal: (f64, f64),
    pub distortion: [f64; 4],
    /// Inertial → camera rotation.
    pub rotation: Matrix3<f64>,
    /// Inertial → camera translation.
    pub translation: Vector3<f64>,
}

/// Result of projecting a point that may lie behind the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel(Vector2<f64>),
    BehindCamera,
}

impl Projection {
    pub fn pixel(self) -> Option<Vector2<f64>> {
        match self {
            Projection::Pixel(p) => Some(p),
            Projection::BehindCamera => None,
        }
    }
}

impl CameraModel {
    pub fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Camera center in the inertial frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// θd(θ) and dθd/dθ.
    fn distort_angle(&self, theta: f64) -> (f64, f64) {
        let [k1, k2, k3, k4] = self.distortion;
        let t2 = theta * theta;
        let poly = 1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4)));
        let dpoly = 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)));
        (theta * poly, dpoly)
    }

    /// Scale `θd / r` and `(d/dr (θd/r)) / r`, with their limits at r → 0.
    fn radial_scale(&self, r: f64) -> (f64, f64) {
        let k1 = self.distortion[0];
        if r < SMALL_RADIUS {
            // θ = r - r³/3 + …, θd = θ + k1 θ³ + … ⇒ θd/r = 1 + (k1 - 1/3) r² + O(r⁴)
            let c = k1 - 1.0 / 3.0;
            return (1.0 + c * r * r, 2.0 * c);
        }
        let theta = r.atan();
        let (theta_d, dtheta_d) = self.distort_angle(theta);
        let scale = theta_d / r;
        let dtheta_dr = 1.0 / (1.0 + r * r);
        let dscale_dr = (dtheta_d * dtheta_dr - scale) / r;
        (scale, dscale_dr / r)
    }

    /// Projects a camera-frame point.
    pub fn project_camera(&self, pc: &Vector3<f64>) -> Projection {
        if !(pc.z > 0.0) {
            return Projection::BehindCamera;
        }
        let a = pc.x / pc.z;
        let b = pc.y / pc.z;
        let r = (a * a + b * b).sqrt();
        let (scale, _) = self.radial_scale(r);
        Projection::Pixel(Vector2::new(
            self.focal.0 * scale * a + self.principal.0,
            self.focal.1 * scale * b + self.principal.1,
        ))
    }

    pub fn project(&self, point: &Vector3<f64>) -> Projection {
        self.project_camera(&self.to_camera(point))
    }

    /// Pixel and ∂(u, v)/∂point for a point in the inertial frame.
    pub fn project_with_jacobian(
        &self,
        point: &Vector3<f64>,
    ) -> Option<(Vector2<f64>, Matrix2x3<f64>)> {
        let pc = self.to_camera(point);
        if !(pc.z > 0.0) {
            return None;
        }
        let inv_z = 1.0 / pc.z;
        let a = pc.x * inv_z;
        let b = pc.y * inv_z;
        let r = (a * a + b * b).sqrt();
        let (s, ds_over_r) = self.radial_scale(r);
        let (fx, fy) = self.focal;
        let pixel = Vector2::new(fx * s * a + self.principal.0, fy * s * b + self.principal.1);

        // ∂(u,v)/∂(a,b)
        let du_da = fx * (s + a * a * ds_over_r);
        let du_db = fx * a * b * ds_over_r;
        let dv_da = fy * a * b * ds_over_r;
        let dv_db = fy * (s + b * b * ds_over_r);
        // ∂(a,b)/∂pc
        let dab = Matrix2x3::new(inv_z, 0.0, -a * inv_z, 0.0, inv_z, -b * inv_z);
        let duv_dab = nalgebra::Matrix2::new(du_da, du_db, dv_da, dv_db);
        Some((pixel, duv_dab * dab * self.rotation))
    }

    pub fn project_jacobian(&self, point: &Vector3<f64>) -> Option<Matrix2x3<f64>> {
        self.project_with_jacobian(point).map(|(_, j)| j)
    }

    /// Inverts the distortion: pixel → unit-depth ray `(a, b, 1)` in the camera frame.
    pub fn undistort(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let ad = (pixel.x - self.principal.0) / self.focal.0;
        let bd = (pixel.y - self.principal.1) / self.focal.1;
        let theta_d = (ad * ad + bd * bd).sqrt();
        if theta_d < SMALL_RADIUS {
            return Vector3::new(ad, bd, 1.0);
        }
        let mut theta = theta_d;
        for _ in 0..UNDISTORT_MAX_ITERS {
            let (f, df) = self.distort_angle(theta);
            let step = (f - theta_d) / df;
            theta -= step;
            if step.abs() < UNDISTORT_TOL {
                break;
            }
        }
        let r = theta.tan();
        Vector3::new(ad * r / theta_d, bd * r / theta_d, 1.0)
    }

    /// Ray through a pixel in the inertial frame: (origin, unit direction).
    pub fn ray(&self, pixel: &Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let dir_cam = self.undistort(pixel);
        let dir = (self.rotation.transpose() * dir_cam).normalize();
        (self.center(), dir)
    }

    pub fn in_image(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.resolution.0 as f64
            && pixel.y < self.resolution.1 as f64
    }

    fn validate(&self) -> Result<()> {
        let name = format!("camera {}", self.id);
        let (w, h) = self.resolution;
        if w == 0 || h == 0 {
            return Err(Error::invalid(format!("{name}: resolution must be positive")));
        }
        if !(self.focal.0 > 0.0 && self.focal.1 > 0.0) {
            return Err(Error::invalid(format!("{name}: K focal lengths must be positive")));
        }
        let (cx, cy) = self.principal;
        if !(cx >= 0.0 && cx < w as f64 && cy >= 0.0 && cy < h as f64) {
            return Err(Error::invalid(format!(
                "{name}: K principal point ({cx}, {cy}) outside the {w}x{h} image"
            )));
        }
        if self.distortion.iter().any(|k| !k.is_finite()) {
            return Err(Error::invalid(format!("{name}: D must be finite")));
        }
        let rtr = self.rotation.transpose() * self.rotation;
        let ortho = (rtr - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if !(ortho <= 1e-9) || !((det - 1.0).abs() <= 1e-9) {
            return Err(Error::invalid(format!(
                "{name}: R is not a proper rotation (|RᵀR - I| = {ortho:e}, det = {det})"
            )));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("{name}: t must be finite")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub rig_id: String,
    pub cameras: Vec<CameraModel>,
    pub frame_rate: f64,
}

impl CameraRig {
    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera_index(&self, id: u32) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::invalid("rig has no cameras"));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            if self.cameras[..i].iter().any(|c| c.id == cam.id) {
                return Err(Error::invalid(format!("duplicate camera id {}", cam.id)));
            }
            cam.validate()?;
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::invalid("frame_rate must be positive"));
        }
        Ok(())
    }

    /// The bundled six-camera synthetic rig (two rows of three cameras
    /// facing a straight track).
    pub fn synthetic() -> Self {
        Self::from_json(include_str!("../data/synthetic_rig.json"))
            .expect("bundled rig is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RigFile =
            serde_json::from_str(text).map_err(|e| Error::parse("calibration file", e))?;
        let rig = file.into_rig();
        rig.validate()?;
        Ok(rig)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RigFile::from_rig(self)).expect("rig serializes")
    }
}

/// Reads and validates a calibration file.
pub fn load_rig(path: impl AsRef<Path>) -> Result<CameraRig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CameraRig::from_json(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

pub const RIG_SCHEMA: &str = "kinetrack.rig/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rig_id: Option<String>,
    cameras: Vec<CameraEntry>,
    frame_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct CameraEntry {
    id: u32,
    resolution: [u32; 2],
    #[serde(rename = "K")]
    k: [f64; 4],
    #[serde(rename = "D")]
    d: [f64; 4],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl RigFile {
    pub(crate) fn into_rig(self) -> CameraRig {
        CameraRig {
            rig_id: self.rig_id.unwrap_or_else(|| "rig".to_string()),
            cameras: self.cameras.into_iter().map(CameraEntry::into_model).collect(),
            frame_rate: self.frame_rate,
        }
    }

    pub(crate) fn from_rig(rig: &CameraRig) -> Self {
        RigFile {
            schema: Some(RIG_SCHEMA.to_string()),
            rig_id: Some(rig.rig_id.clone()),
            cameras: rig.cameras.iter().map(CameraEntry::from_model).collect(),
            frame_rate: rig.frame_rate,
        }
    }
}

impl CameraEntry {
    fn into_model(self) -> CameraModel {
        CameraModel {
            id: self.id,
            resolution: (self.resolution[0], self.resolution[1]),
            focal: (self.k[0], self.k[1]),
            principal: (self.k[2], self.k[3]),
            distortion: self.d,
            rotation: Matrix3::from_row_slice(&self.r),
            translation: Vector3::from(self.t),
        }
    }

    fn from_model(cam: &CameraModel) -> Self {
        let r = &cam.rotation;
        CameraEntry {
            id: cam.id,
            resolution: [cam.resolution.0, cam.resolution.1],
            k: [cam.focal.0, cam.focal.1, cam.principal.0, cam.principal.1],
            d: cam.distortion,
            r: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            t: [cam.translation.x, cam.translation.y, cam.translation.z],
        }
    }
}

/// Serde helper so other documents can embed a rig in the calibration schema.
pub(crate) mod embedded {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rig: &CameraRig, s: S) -> std::result::Result<S::Ok, S::Error> {
        RigFile::from_rig(rig).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<CameraRig, D::Error> {
        let file = RigFile::deserialize(d)?;
        let rig = file.into_rig();
        rig.validate().map_err(serde::de::Error::custom)?;
        Ok(rig)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn axis_camera(k: [f64; 4]) -> CameraModel {
        CameraModel {
            id: 0,
            resolution: (2704, 1520),
            focal: (1000.0, 1010.0),
            principal: (1352.0, 760.0),
            distortion: k,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = axis_camera([0.1, 0.01, 0.0, 0.0]);
        let p = cam.project(&Vector3::new(0.0, 0.0, 5.0)).pixel().unwrap();
        assert_eq!(p, Vector2::new(1352.0, 760.0));
    }

    #[test]
    fn behind_camera_is_flagged() {
        let cam = axis_camera([0.0; 4]);
        assert_eq!(cam.project(&Vector3::new(0.1, 0.0, -1.0)), Projection::BehindCamera);
        assert_eq!(cam.project(&Vector3::new(0.1, 0.0, 0.0)), Projection::BehindCamera);
        assert!(cam.project_jacobian(&Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn small_angle_matches_pinhole() {
        let cam = axis_camera([0.0; 4]);
        // θ < 0.01 rad
        let pt = Vector3::new(0.004, -0.003, 0.5);
        let fish = cam.project(&pt).pixel().unwrap();
        let pin = Vector2::new(
            1000.0 * pt.x / pt.z + 1352.0,
            1010.0 * pt.y / pt.z + 760.0,
        );
        assert!((fish - pin).norm() < 0.01);
    }

    #[test]
    fn continuous_at_axis() {
        let cam = axis_camera([-0.02, 0.004, -0.0007, 0.0001]);
        let pt = Vector3::new(1e-12, 0.0, 1.0);
        let near = cam.project(&pt).pixel().unwrap();
        let limit = Vector2::new(1000.0 * 1e-12 + 1352.0, 760.0);
        assert!((near - limit).norm() < 1e-9);
    }

    #[test]
    fn axis_jacobian_decouples() {
        let cam = axis_camera([-0.02, 0.004, 0.0, 0.0]);
        let j = cam.project_jacobian(&Vector3::new(0.0, 0.0, 4.0)).unwrap();
        assert_eq!(j[(0, 1)], 0.0);
        assert_eq!(j[(1, 0)], 0.0);
    }

    #[test]
    fn doubling_fx_doubles_first_row() {
        let cam = axis_camera([-0.02, 0.004, 0.0, 0.0]);
        let mut wide = cam.clone();
        wide.focal.0 *= 2.0;
        let pt = Vector3::new(0.3, -0.2, 3.0);
        let j1 = cam.project_jacobian(&pt).unwrap();
        let j2 = wide.project_jacobian(&pt).unwrap();
        assert_abs_diff_eq!(j2.row(0).into_owned(), 2.0 * j1.row(0), epsilon = 1e-12);
        assert_abs_diff_eq!(j2.row(1).into_owned(), j1.row(1).into_owned(), epsilon = 1e-15);
    }

    #[test]
    fn undistort_inverts_projection() {
        let cam = axis_camera([-0.021, 0.0042, -0.0007, 0.00011]);
        for pt in [
            Vector3::new(0.3, -0.2, 3.0),
            Vector3::new(-2.0, 1.0, 1.5),
            Vector3::new(1e-9, 0.0, 2.0),
        ] {
            let px = cam.project(&pt).pixel().unwrap();
            let ray = cam.undistort(&px);
            assert_abs_diff_eq!(ray.x, pt.x / pt.z, epsilon = 1e-10);
            assert_abs_diff_eq!(ray.y, pt.y / pt.z, epsilon = 1e-10);
        }
    }

    #[test]
    fn synthetic_rig_loads() {
        let rig = CameraRig::synthetic();
        assert_eq!(rig.len(), 6);
        assert_eq!(rig.frame_rate, 120.0);
        let again = CameraRig::from_json(&rig.to_json()).unwrap();
        assert_eq!(rig, again);
    }

    fn rig_doc() -> serde_json::Value {
        serde_json::from_str(include_str!("../data/synthetic_rig.json")).unwrap()
    }

    #[test]
    fn reflection_rejected() {
        let mut doc = rig_doc();
        let r = doc["cameras"][2]["R"].as_array_mut().unwrap();
        for v in r.iter_mut().take(3) {
            *v = (-v.as_f64().unwrap()).into();
        }
        let err = CameraRig::from_json(&doc.to_string()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("camera 2") && msg.contains("R"), "{msg}");
    }

    #[test]
    fn missing_k4_is_parse_error() {
        let mut doc = rig_doc();
        doc["cameras"][0]["D"].as_array_mut().unwrap().pop();
        let err = CameraRig::from_json(&doc.to_string()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn unknown_field_rejected() {
        let mut doc = rig_doc();
        doc["cameras"][0]["skew"] = 0.0.into();
        assert!(matches!(
            CameraRig::from_json(&doc.to_string()).unwrap_err(),
            Error::Parse { .. }
        ));
    }
}
