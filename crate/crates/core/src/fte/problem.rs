use nalgebra::{SMatrix, SVector, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::banded::BandedSpd;
use super::cost::{robust_cost, robust_cost_derivative, robust_weight, RobustCostParams};
use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::observation::FrameObservations;
use crate::skeleton::{GeneralizedPose, MarkerCloud, SkeletonModel, POSE_DIM};

/// Leading blocks of the variable vector that parameterize ẋ and ẍ at the first frame.
pub const VIRTUAL_BLOCKS: usize = 2;
/// Third differences couple a block with the three before it.
const BANDWIDTH: usize = 3 * POSE_DIM;
const THIRD_DIFFERENCE: [f64; 4] = [1.0, -3.0, 3.0, -1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FteConfig {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Measurement standard deviation (px).
    pub sigma_meas: f64,
    /// Acceleration-disturbance σ for the root translation (m/s²).
    pub sigma_model_translation: f64,
    /// Acceleration-disturbance σ for every angle (rad/s²).
    pub sigma_model_angle: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_model: Option<Vec<f64>>,
    pub likelihood_threshold: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the ∞-norm of the projected gradient.
    pub tolerance: f64,
    /// Runs longer than this are solved in overlapping windows.
    pub window_threshold: usize,
    pub window_len: usize,
    pub window_overlap: usize,
}

impl Default for FteConfig {
    fn default() -> Self {
        let cost = RobustCostParams::default();
        FteConfig {
            a: cost.a,
            b: cost.b,
            c: cost.c,
            sigma_meas: 5.0,
            sigma_model_translation: 5.0,
            sigma_model_angle: 50.0,
            sigma_model: None,
            likelihood_threshold: 0.5,
            max_iterations: 500,
            tolerance: 1e-6,
            window_threshold: 500,
            window_len: 200,
            window_overlap: 20,
        }
    }
}

impl FteConfig {
    pub fn cost_params(&self) -> RobustCostParams {
        RobustCostParams {
            a: self.a,
            b: self.b,
            c: self.c,
        }
    }

    pub fn sigma_model(&self, model: &SkeletonModel) -> [f64; POSE_DIM] {
        let mut out = [0.0; POSE_DIM];
        for (i, s) in out.iter_mut().enumerate() {
            *s = match &self.sigma_model {
                Some(v) => v[i],
                None if model.translation.contains(&i) => self.sigma_model_translation,
                None => self.sigma_model_angle,
            };
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.cost_params().validate()?;
        for (name, v) in [
            ("sigma_meas", self.sigma_meas),
            ("sigma_model_translation", self.sigma_model_translation),
            ("sigma_model_angle", self.sigma_model_angle),
            ("tolerance", self.tolerance),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("fte.{name} must be positive")));
            }
        }
        if let Some(s) = &self.sigma_model {
            if s.len() != POSE_DIM || s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::invalid(format!(
                    "fte.sigma_model must hold {POSE_DIM} positive values"
                )));
            }
        }
        if self.window_len < 2 || self.window_overlap >= self.window_len {
            return Err(Error::invalid(
                "fte.window_len must be >= 2 and larger than fte.window_overlap",
            ));
        }
        Ok(())
    }
}

/// A measurement that passed the likelihood mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Channel {
    pub camera: usize,
    pub marker: usize,
    pub pixel: Vector2<f64>,
}

/// Batch estimation problem over a contiguous run of frames.
///
/// The independent variables are the poses of `N + 2` blocks: two leading
/// virtual blocks followed by one block per frame. Velocities, accelerations
/// and disturbances follow from backward differences, which makes the
/// implicit-Euler dynamics hold by construction:
///
/// - `ẋ_k = (x_k − x_{k−1}) / Δt`
/// - `ẍ_k = (ẋ_k − ẋ_{k−1}) / Δt`
/// - `w_k = ẍ_k − ẍ_{k−1}` for `k ≥ 1`
///
/// The virtual blocks are a reparameterization of `ẋ_0` and `ẍ_0`.
#[derive(Debug, Clone)]
pub struct FteProblem<'a> {
    pub model: &'a SkeletonModel,
    pub rig: &'a CameraRig,
    pub frames: Vec<usize>,
    pub measurements: Vec<Vec<Channel>>,
    pub dt: f64,
    pub cost: RobustCostParams,
    pub sigma_meas: f64,
    pub sigma_model: [f64; POSE_DIM],
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Per-frame measurement term: cost, gradient and Gauss–Newton block.
struct FrameTerm {
    cost: f64,
    gradient: SVector<f64, POSE_DIM>,
    hessian: SMatrix<f64, POSE_DIM, POSE_DIM>,
}

impl<'a> FteProblem<'a> {
    pub fn new(
        frames: &[FrameObservations],
        n_markers: usize,
        rig: &'a CameraRig,
        model: &'a SkeletonModel,
        cfg: &FteConfig,
    ) -> Self {
        let measurements = frames
            .iter()
            .map(|f| {
                f.points
                    .iter()
                    .enumerate()
                    .filter_map(|(slot, kp)| {
                        kp.filter(|kp| kp.likelihood >= cfg.likelihood_threshold)
                            .map(|kp| Channel {
                                camera: slot / n_markers,
                                marker: slot % n_markers,
                                pixel: kp.pixel(),
                            })
                    })
                    .collect()
            })
            .collect();
        let n_blocks = frames.len() + VIRTUAL_BLOCKS;
        let mut lower = vec![f64::NEG_INFINITY; n_blocks * POSE_DIM];
        let mut upper = vec![f64::INFINITY; n_blocks * POSE_DIM];
        for block in VIRTUAL_BLOCKS..n_blocks {
            for (j, b) in model.bounds.iter().enumerate() {
                lower[block * POSE_DIM + j] = b.min;
                upper[block * POSE_DIM + j] = b.max;
            }
        }
        FteProblem {
            model,
            rig,
            frames: frames.iter().map(|f| f.frame).collect(),
            measurements,
            dt: rig.dt(),
            cost: cfg.cost_params(),
            sigma_meas: cfg.sigma_meas,
            sigma_model: cfg.sigma_model(model),
            lower,
            upper,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_vars(&self) -> usize {
        (self.n_frames() + VIRTUAL_BLOCKS) * POSE_DIM
    }

    pub fn pose(&self, z: &[f64], frame_pos: usize) -> GeneralizedPose {
        let start = (frame_pos + VIRTUAL_BLOCKS) * POSE_DIM;
        GeneralizedPose::from_slice(&z[start..start + POSE_DIM])
    }

    /// Variable vector for a sequence of frame poses at rest before the first frame.
    pub fn pack(&self, poses: &[GeneralizedPose]) -> Vec<f64> {
        assert_eq!(poses.len(), self.n_frames());
        let mut z = Vec::with_capacity(self.n_vars());
        for _ in 0..VIRTUAL_BLOCKS {
            z.extend_from_slice(&poses[0].0);
        }
        for p in poses {
            z.extend_from_slice(&p.0);
        }
        z
    }

    pub fn project_to_bounds(&self, z: &mut [f64]) {
        for ((v, lo), hi) in z.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.max(*lo).min(*hi);
        }
    }

    fn frame_term(&self, pose: &GeneralizedPose, channels: &[Channel], derivatives: bool) -> FrameTerm {
        let mut term = FrameTerm {
            cost: 0.0,
            gradient: SVector::zeros(),
            hessian: SMatrix::zeros(),
        };
        let inv_sigma = 1.0 / self.sigma_meas;
        if !derivatives {
            let cloud = self.model.forward_kinematics(pose);
            for ch in channels {
                let cam = &self.rig.cameras[ch.camera];
                match cam.project(&cloud.0[ch.marker]).pixel() {
                    Some(px) => {
                        for k in 0..2 {
                            term.cost += robust_cost((ch.pixel[k] - px[k]) * inv_sigma, &self.cost);
                        }
                    }
                    None => term.cost += 2.0 * self.cost.saturation(),
                }
            }
            return term;
        }
        let (cloud, fk) = self.model.forward_kinematics_with_jacobian(pose);
        for ch in channels {
            let cam = &self.rig.cameras[ch.camera];
            let Some((px, pj)) = cam.project_with_jacobian(&cloud.0[ch.marker]) else {
                term.cost += 2.0 * self.cost.saturation();
                continue;
            };
            let h = pj * fk.fixed_rows::<3>(3 * ch.marker);
            for k in 0..2 {
                let e = (ch.pixel[k] - px[k]) * inv_sigma;
                term.cost += robust_cost(e, &self.cost);
                // de/dq = −h_k / σ
                let row = h.row(k).transpose() * (-inv_sigma);
                term.gradient += row * robust_cost_derivative(e, &self.cost);
                let w = robust_weight(e, &self.cost);
                if w > 0.0 {
                    term.hessian += w * row * row.transpose();
                }
            }
        }
        term
    }

    /// Third-difference disturbance residual `w_kj / σ_j` for frame `k ≥ 1`.
    #[inline]
    fn model_residual(&self, z: &[f64], frame_pos: usize, j: usize) -> f64 {
        let block = frame_pos + VIRTUAL_BLOCKS;
        let scale = 1.0 / (self.dt * self.dt * self.sigma_model[j]);
        let mut r = 0.0;
        for (i, c) in THIRD_DIFFERENCE.iter().enumerate() {
            r += c * z[(block - i) * POSE_DIM + j];
        }
        r * scale
    }

    fn model_cost(&self, z: &[f64]) -> f64 {
        let mut cost = 0.0;
        for k in 1..self.n_frames() {
            for j in 0..POSE_DIM {
                let r = self.model_residual(z, k, j);
                cost += r * r;
            }
        }
        cost
    }

    fn measurement_terms(&self, z: &[f64], derivatives: bool) -> Vec<FrameTerm> {
        (0..self.n_frames())
            .into_par_iter()
            .map(|k| self.frame_term(&self.pose(z, k), &self.measurements[k], derivatives))
            .collect()
    }

    /// e_meas + e_model.
    pub fn objective(&self, z: &[f64]) -> f64 {
        let meas: f64 = self.measurement_terms(z, false).iter().map(|t| t.cost).sum();
        meas + self.model_cost(z)
    }

    /// Objective and its gradient with respect to the independent variables.
    pub fn objective_and_gradient(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let (cost, grad, _) = self.linearize(z);
        (cost, grad)
    }

    /// Objective, gradient and Gauss–Newton approximation of the Hessian.
    pub fn linearize(&self, z: &[f64]) -> (f64, Vec<f64>, BandedSpd) {
        let n = self.n_vars();
        let mut grad = vec![0.0; n];
        let mut hess = BandedSpd::zeros(n, BANDWIDTH);
        let mut cost = 0.0;
        for (k, term) in self.measurement_terms(z, true).into_iter().enumerate() {
            cost += term.cost;
            let base = (k + VIRTUAL_BLOCKS) * POSE_DIM;
            for i in 0..POSE_DIM {
                grad[base + i] += term.gradient[i];
                for j in 0..=i {
                    let v = term.hessian[(i, j)];
                    if v != 0.0 {
                        hess.add_lower(base + i, base + j, v);
                    }
                }
            }
        }
        for k in 1..self.n_frames() {
            let block = k + VIRTUAL_BLOCKS;
            for j in 0..POSE_DIM {
                let scale = 1.0 / (self.dt * self.dt * self.sigma_model[j]);
                let r = self.model_residual(z, k, j);
                cost += r * r;
                for (a, ca) in THIRD_DIFFERENCE.iter().enumerate() {
                    let ia = (block - a) * POSE_DIM + j;
                    grad[ia] += 2.0 * r * ca * scale;
                    for (b, cb) in THIRD_DIFFERENCE.iter().enumerate().skip(a) {
                        let ib = (block - b) * POSE_DIM + j;
                        hess.add_lower(ia, ib, 2.0 * ca * cb * scale * scale);
                    }
                }
            }
        }
        (cost, grad, hess)
    }

    /// ∞-norm of `P(z − g) − z`, the first-order optimality measure under the bounds.
    pub fn projected_gradient_norm(&self, z: &[f64], grad: &[f64]) -> f64 {
        z.iter()
            .zip(grad)
            .zip(self.lower.iter().zip(&self.upper))
            .map(|((x, g), (lo, hi))| ((x - g).max(*lo).min(*hi) - x).abs())
            .fold(0.0, f64::max)
    }

    /// Every trajectory variable implied by `z`.
    pub fn variables(&self, z: &[f64]) -> FteVariables {
        let n = self.n_frames();
        let block = |b: usize| GeneralizedPose::from_slice(&z[b * POSE_DIM..(b + 1) * POSE_DIM]);
        let diff = |a: &GeneralizedPose, b: &GeneralizedPose| {
            let mut out = GeneralizedPose::zeros();
            for j in 0..POSE_DIM {
                out[j] = (a[j] - b[j]) / self.dt;
            }
            out
        };
        let x: Vec<GeneralizedPose> = (0..n).map(|k| block(k + VIRTUAL_BLOCKS)).collect();
        let xdot_virtual = diff(&block(1), &block(0));
        let mut xdot = Vec::with_capacity(n);
        let mut xddot = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        for k in 0..n {
            let prev_x = if k == 0 { block(1) } else { x[k - 1] };
            let v = diff(&x[k], &prev_x);
            let prev_v = if k == 0 { xdot_virtual } else { xdot[k - 1] };
            let acc = diff(&v, &prev_v);
            let mut dist = GeneralizedPose::zeros();
            if k > 0 {
                let prev_a: &GeneralizedPose = &xddot[k - 1];
                for j in 0..POSE_DIM {
                    dist[j] = acc[j] - prev_a[j];
                }
            }
            xdot.push(v);
            xddot.push(acc);
            w.push(dist);
        }
        let s: Vec<MarkerCloud> = x.iter().map(|q| self.model.forward_kinematics(q)).collect();
        let v = (0..n)
            .map(|k| {
                self.measurements[k]
                    .iter()
                    .map(|ch| {
                        let px = self.rig.cameras[ch.camera].project(&s[k].0[ch.marker]).pixel();
                        MeasurementResidual {
                            camera: ch.camera,
                            marker: ch.marker,
                            residual: px.map(|p| ch.pixel - p),
                        }
                    })
                    .collect()
            })
            .collect();
        FteVariables {
            frames: self.frames.clone(),
            x,
            xdot,
            xddot,
            s,
            w,
            v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementResidual {
    pub camera: usize,
    pub marker: usize,
    /// `y − h(s)`; `None` when the marker is behind the camera.
    pub residual: Option<Vector2<f64>>,
}

/// The full set of trajectory variables at a solution.
#[derive(Debug, Clone, PartialEq)]
pub struct FteVariables {
    pub frames: Vec<usize>,
    pub x: Vec<GeneralizedPose>,
    pub xdot: Vec<GeneralizedPose>,
    pub xddot: Vec<GeneralizedPose>,
    pub s: Vec<MarkerCloud>,
    /// Acceleration disturbances; the first frame carries zeros (no constraint there).
    pub w: Vec<GeneralizedPose>,
    pub v: Vec<Vec<MeasurementResidual>>,
}

/// Measurement cost `Σ C(v / σ_meas)` over scalar residuals.
pub fn measurement_cost(residuals: &[f64], sigma_meas: f64, cost: &RobustCostParams) -> f64 {
    residuals
        .iter()
        .map(|v| robust_cost(v / sigma_meas, cost))
        .sum()
}

/// Model cost `Σ (w_j / σ_model_j)²` over disturbance vectors.
pub fn model_cost(disturbances: &[GeneralizedPose], sigma_model: &[f64; POSE_DIM]) -> f64 {
    disturbances
        .iter()
        .flat_map(|w| w.0.iter().zip(sigma_model).map(|(w, s)| (w / s) * (w / s)))
        .sum()
}
