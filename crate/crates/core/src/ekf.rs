//! Extended Kalman filter over the 72-dimensional kinematic state.
//!
//! The state stacks pose, pose rate and pose acceleration,
//! `[q (24), q̇ (24), q̈ (24)]`, and evolves under a constant-acceleration
//! model driven by white jerk. Measurements are the fisheye projections of
//! the forward-kinematics markers, stacked camera-major, then marker, then
//! (u, v). Missing detections are left out of the stack; low-likelihood
//! detections stay in with an inflated variance.
//!
//! Innovations larger than `gate_multiplier · √S_ii` are zeroed before the
//! gain is applied.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::observation::{
    FrameDiagnostics, FrameEstimate, FrameObservations, Method, ObservationSet, TrajectoryEstimate,
};
use crate::skeleton::{GeneralizedPose, SkeletonModel, POSE_DIM};

pub const STATE_DIM: usize = 3 * POSE_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfConfig {
    /// Sample time (s). Normally `1 / frame_rate`.
    pub dt: f64,
    /// Jerk standard deviation for the root translation (m/s³).
    pub jerk_sigma_translation: f64,
    /// Jerk standard deviation for every angle (rad/s³).
    pub jerk_sigma_angle: f64,
    /// Per-parameter override of the two values above.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jerk_sigmas: Option<Vec<f64>>,
    pub meas_sigma: f64,
    pub low_likelihood_sigma: f64,
    pub likelihood_threshold: f64,
    pub gate_multiplier: f64,
    /// Initial standard deviation of pose entries (m or rad).
    pub init_pose_sigma: f64,
    /// Initial standard deviation of velocity and acceleration entries.
    pub init_rate_sigma: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        EkfConfig {
            dt: 1.0 / 120.0,
            jerk_sigma_translation: 200.0,
            jerk_sigma_angle: 500.0,
            jerk_sigmas: None,
            meas_sigma: 5.0,
            low_likelihood_sigma: 2704.0,
            likelihood_threshold: 0.5,
            gate_multiplier: 3.0,
            init_pose_sigma: 0.5,
            init_rate_sigma: 5.0,
        }
    }
}

impl EkfConfig {
    pub fn with_dt(dt: f64) -> Self {
        EkfConfig {
            dt,
            ..Default::default()
        }
    }

    /// Per-parameter jerk σ_i.
    pub fn jerk_sigmas(&self, model: &SkeletonModel) -> Vec<f64> {
        match &self.jerk_sigmas {
            Some(s) => s.clone(),
            None => (0..POSE_DIM)
                .map(|i| {
                    if model.translation.contains(&i) {
                        self.jerk_sigma_translation
                    } else {
                        self.jerk_sigma_angle
                    }
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let positive = [
            ("dt", self.dt),
            ("jerk_sigma_translation", self.jerk_sigma_translation),
            ("jerk_sigma_angle", self.jerk_sigma_angle),
            ("meas_sigma", self.meas_sigma),
            ("low_likelihood_sigma", self.low_likelihood_sigma),
            ("likelihood_threshold", self.likelihood_threshold),
            ("init_pose_sigma", self.init_pose_sigma),
            ("init_rate_sigma", self.init_rate_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(crate::Error::invalid(format!("ekf.{name} must be positive")));
            }
        }
        if !(self.gate_multiplier >= 1.0) {
            return Err(crate::Error::invalid("ekf.gate_multiplier must be >= 1"));
        }
        if let Some(s) = &self.jerk_sigmas {
            if s.len() != POSE_DIM || s.iter().any(|v| !(*v > 0.0)) {
                return Err(crate::Error::invalid(format!(
                    "ekf.jerk_sigmas must hold {POSE_DIM} positive values"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl EkfState {
    /// Pose seeded state with zero rates and a diagonal prior.
    pub fn initial(pose: &GeneralizedPose, cfg: &EkfConfig) -> Self {
        let mut mean = DVector::zeros(STATE_DIM);
        mean.rows_mut(0, POSE_DIM).copy_from_slice(&pose.0);
        let mut diag = DVector::from_element(STATE_DIM, cfg.init_rate_sigma.powi(2));
        diag.rows_mut(0, POSE_DIM).fill(cfg.init_pose_sigma.powi(2));
        EkfState {
            mean,
            covariance: DMatrix::from_diagonal(&diag),
        }
    }

    pub fn pose(&self) -> GeneralizedPose {
        GeneralizedPose::from_slice(self.mean.rows(0, POSE_DIM).as_slice())
    }

    pub fn velocity(&self) -> GeneralizedPose {
        GeneralizedPose::from_slice(self.mean.rows(POSE_DIM, POSE_DIM).as_slice())
    }

    pub fn acceleration(&self) -> GeneralizedPose {
        GeneralizedPose::from_slice(self.mean.rows(2 * POSE_DIM, POSE_DIM).as_slice())
    }

    fn symmetrize(&mut self) {
        let p = &self.covariance;
        self.covariance = 0.5 * (p + p.transpose());
    }
}

/// Constant-acceleration transition matrix.
pub fn transition(dt: f64) -> DMatrix<f64> {
    let mut f = DMatrix::identity(STATE_DIM, STATE_DIM);
    for i in 0..POSE_DIM {
        f[(i, POSE_DIM + i)] = dt;
        f[(i, 2 * POSE_DIM + i)] = 0.5 * dt * dt;
        f[(POSE_DIM + i, 2 * POSE_DIM + i)] = dt;
    }
    f
}

/// Discrete white-jerk process noise `G σ_i² Gᵀ`, `G = [Δt³/6, Δt²/2, Δt]ᵀ`.
pub fn process_noise(dt: f64, jerk_sigmas: &[f64]) -> DMatrix<f64> {
    let g = [dt.powi(3) / 6.0, dt * dt / 2.0, dt];
    let mut q = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for (i, sigma) in jerk_sigmas.iter().enumerate() {
        let var = sigma * sigma;
        for (a, ga) in g.iter().enumerate() {
            for (b, gb) in g.iter().enumerate() {
                q[(a * POSE_DIM + i, b * POSE_DIM + i)] = ga * gb * var;
            }
        }
    }
    q
}

/// Time update.
pub fn ekf_predict(state: &EkfState, cfg: &EkfConfig, model: &SkeletonModel) -> EkfState {
    let f = transition(cfg.dt);
    let q = process_noise(cfg.dt, &cfg.jerk_sigmas(model));
    let mut out = EkfState {
        mean: &f * &state.mean,
        covariance: &f * &state.covariance * f.transpose() + q,
    };
    out.symmetrize();
    out
}

/// Stacked measurement model at a state.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    /// (camera, marker, coordinate) of every stacked channel.
    pub channels: Vec<(usize, usize, usize)>,
    pub measured: DVector<f64>,
    pub predicted: DVector<f64>,
    /// ∂h/∂q for each channel (the q̇ and q̈ columns are zero).
    pub jacobian: DMatrix<f64>,
    pub noise_variance: DVector<f64>,
}

/// Builds z, ẑ = h(x̂), H and diag(R) for the detections of one frame.
pub fn measurement_model(
    pose: &GeneralizedPose,
    frame: &FrameObservations,
    n_markers: usize,
    rig: &CameraRig,
    model: &SkeletonModel,
    cfg: &EkfConfig,
) -> MeasurementModel {
    let (cloud, fk_jac) = model.forward_kinematics_with_jacobian(pose);
    let mut channels = Vec::new();
    let mut measured = Vec::new();
    let mut predicted = Vec::new();
    let mut rows: Vec<[f64; POSE_DIM]> = Vec::new();
    let mut noise = Vec::new();
    for (c, cam) in rig.cameras.iter().enumerate() {
        for m in 0..n_markers {
            let Some(kp) = frame.points[c * n_markers + m] else {
                continue;
            };
            let Some((px, pj)) = cam.project_with_jacobian(&cloud.0[m]) else {
                continue;
            };
            let marker_jac = fk_jac.fixed_rows::<3>(3 * m);
            let h = pj * marker_jac;
            let var = if kp.likelihood >= cfg.likelihood_threshold {
                cfg.meas_sigma * cfg.meas_sigma
            } else {
                cfg.low_likelihood_sigma * cfg.low_likelihood_sigma
            };
            for (coord, value) in [kp.u, kp.v].into_iter().enumerate() {
                channels.push((c, m, coord));
                measured.push(value);
                predicted.push(px[coord]);
                let mut row = [0.0; POSE_DIM];
                for (k, r) in row.iter_mut().enumerate() {
                    *r = h[(coord, k)];
                }
                rows.push(row);
                noise.push(var);
            }
        }
    }
    let n = channels.len();
    let jacobian = DMatrix::from_fn(n, POSE_DIM, |i, j| rows[i][j]);
    MeasurementModel {
        channels,
        measured: DVector::from_vec(measured),
        predicted: DVector::from_vec(predicted),
        jacobian,
        noise_variance: DVector::from_vec(noise),
    }
}

/// Zeroes every innovation component with `|ỹ_i| ≥ multiplier · √S_ii`.
/// Returns the number of zeroed components.
pub fn gate_innovation(innovation: &mut DVector<f64>, s: &DMatrix<f64>, multiplier: f64) -> usize {
    let mut gated = 0;
    for i in 0..innovation.len() {
        let limit = multiplier * s[(i, i)].max(0.0).sqrt();
        if innovation[i] != 0.0 && innovation[i].abs() >= limit {
            innovation[i] = 0.0;
            gated += 1;
        }
    }
    gated
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateDiagnostics {
    pub channels: usize,
    pub gated: usize,
    /// S was not positive definite; the state was left unchanged.
    pub skipped: bool,
}

/// Measurement update with innovation gating and Joseph-form covariance.
pub fn ekf_update(
    state: &EkfState,
    frame: &FrameObservations,
    n_markers: usize,
    rig: &CameraRig,
    model: &SkeletonModel,
    cfg: &EkfConfig,
) -> (EkfState, UpdateDiagnostics) {
    let meas = measurement_model(&state.pose(), frame, n_markers, rig, model, cfg);
    apply_measurement(state, &meas, cfg.gate_multiplier)
}

/// The update proper, given a linearized measurement model.
pub fn apply_measurement(
    state: &EkfState,
    meas: &MeasurementModel,
    gate_multiplier: f64,
) -> (EkfState, UpdateDiagnostics) {
    let n = meas.channels.len();
    let mut diag = UpdateDiagnostics {
        channels: n,
        ..Default::default()
    };
    if n == 0 {
        return (state.clone(), diag);
    }
    let h = &meas.jacobian;
    // P Hᵀ uses only the pose columns of P.
    let p_q = state.covariance.columns(0, POSE_DIM);
    let pht = p_q * h.transpose(); // 72 × n
    let hph = h * pht.rows(0, POSE_DIM); // n × n
    let mut s = hph;
    for i in 0..n {
        s[(i, i)] += meas.noise_variance[i];
    }
    let s = 0.5 * (&s + s.transpose());

    let mut innovation = &meas.measured - &meas.predicted;
    diag.gated = gate_innovation(&mut innovation, &s, gate_multiplier);

    let Some(chol) = s.clone().cholesky() else {
        diag.skipped = true;
        return (state.clone(), diag);
    };
    // K = P Hᵀ S⁻¹ = (S⁻¹ H P)ᵀ
    let gain = chol.solve(&pht.transpose()).transpose(); // 72 × n
    if gain.iter().any(|v| !v.is_finite()) {
        diag.skipped = true;
        return (state.clone(), diag);
    }
    let mean = &state.mean + &gain * &innovation;

    let mut a = DMatrix::identity(STATE_DIM, STATE_DIM);
    {
        let kh = &gain * h; // 72 × 24
        let mut cols = a.columns_mut(0, POSE_DIM);
        cols -= kh;
    }
    let kr = DMatrix::from_fn(STATE_DIM, n, |i, j| gain[(i, j)] * meas.noise_variance[j]);
    let covariance = &a * &state.covariance * a.transpose() + kr * gain.transpose();
    let mut out = EkfState { mean, covariance };
    out.symmetrize();
    (out, diag)
}

/// Filters a whole run: update on the first frame, then predict/update.
pub fn run_ekf(
    obs: &ObservationSet,
    rig: &CameraRig,
    model: &SkeletonModel,
    cfg: &EkfConfig,
    init: EkfState,
) -> TrajectoryEstimate {
    let mut state = init;
    let mut frames = Vec::with_capacity(obs.len());
    for (pos, frame) in obs.frames.iter().enumerate() {
        if pos > 0 {
            state = ekf_predict(&state, cfg, model);
        }
        let (next, d) = ekf_update(&state, frame, obs.n_markers, rig, model, cfg);
        state = next;
        if d.skipped {
            log::warn!("ekf: frame {} update skipped (singular innovation covariance)", frame.frame);
        }
        let pose = state.pose();
        let cloud = model.forward_kinematics(&pose);
        let mut est = FrameEstimate::from_cloud(frame.frame, pose, &cloud);
        est.velocity = Some(state.velocity());
        est.acceleration = Some(state.acceleration());
        est.diagnostics = FrameDiagnostics {
            valid_markers: cloud.len(),
            channels: Some(d.channels),
            gated_channels: Some(d.gated),
            skipped_update: d.skipped,
            ..Default::default()
        };
        frames.push(est);
    }
    TrajectoryEstimate {
        method: Method::Ekf,
        frames,
        solver: Vec::new(),
    }
}

/// Initial state from the first frame's triangulated markers.
pub fn initial_state_from_points(
    model: &SkeletonModel,
    points: &[Option<Vector3<f64>>],
    cfg: &EkfConfig,
) -> EkfState {
    let pose = crate::init::root_pose_from_points(model, points).unwrap_or_default();
    EkfState::initial(&pose, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_predict_only_grows_covariance() {
        let model = SkeletonModel::cheetah();
        let cfg = EkfConfig::default();
        let mut pose = GeneralizedPose::zeros();
        pose[0] = 1.0;
        pose[7] = 0.2;
        let s0 = EkfState::initial(&pose, &cfg);
        let s1 = ekf_predict(&s0, &cfg, &model);
        assert_eq!(s1.mean, s0.mean);
        let f = transition(cfg.dt);
        let expected = &f * &s0.covariance * f.transpose()
            + process_noise(cfg.dt, &cfg.jerk_sigmas(&model));
        assert!((&s1.covariance - expected).abs().max() < 1e-12);
    }

    #[test]
    fn constant_acceleration_integrates_exactly() {
        let model = SkeletonModel::cheetah();
        let cfg = EkfConfig::with_dt(0.125);
        let mut s = EkfState::initial(&GeneralizedPose::zeros(), &cfg);
        let c = 2.0;
        s.mean[2 * POSE_DIM + 5] = c;
        for _ in 0..8 {
            s = ekf_predict(&s, &cfg, &model);
        }
        assert_eq!(s.mean[POSE_DIM + 5], 8.0 * 0.125 * c);
        assert_eq!(s.mean[2 * POSE_DIM + 5], c);
    }

    #[test]
    fn gate_zeroes_large_components_only() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 4.0, 9.0]));
        let mut y = DVector::from_vec(vec![6.2, -5.9, 9.0]);
        let gated = gate_innovation(&mut y, &s, 3.0);
        assert_eq!(gated, 2);
        assert_eq!(y.as_slice(), &[0.0, -5.9, 0.0]);
        let again = gate_innovation(&mut y, &s, 3.0);
        assert_eq!(again, 0);
        assert_eq!(y.as_slice(), &[0.0, -5.9, 0.0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EkfConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.gate_multiplier = 0.5;
        assert!(cfg.validate().is_err());
    }
}
