//! Synthetic runs and the noise/outlier corruption model.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::observation::{FrameObservations, Keypoint, ObservationSet};
use crate::skeleton::{GeneralizedPose, MarkerCloud, SkeletonModel};

pub const GROUND_TRUTH_SCHEMA: &str = "kinetrack.groundtruth/1";

/// Sinusoid `offset + amplitude · sin(2π t / T + phase)` on one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointWave {
    pub parameter: String,
    pub offset: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitProfile {
    /// Forward speed along +x (m/s).
    pub speed: f64,
    /// Stride period (s).
    pub stride_period: f64,
    /// Mean height of the head (m).
    pub height: f64,
    /// Vertical bob amplitude (m), twice per stride.
    pub bob: f64,
    /// Starting x; `None` centres the run on x = 0.
    pub start_x: Option<f64>,
    pub joints: Vec<JointWave>,
}

fn wave(parameter: &str, offset: f64, amplitude: f64, phase: f64) -> JointWave {
    JointWave {
        parameter: parameter.to_string(),
        offset,
        amplitude,
        phase,
    }
}

impl Default for GaitProfile {
    fn default() -> Self {
        Self::gallop()
    }
}

impl GaitProfile {
    /// Rotary gallop: legs swing in offset pairs, the spine flexes with the
    /// stride and the tail counter-swings.
    pub fn gallop() -> Self {
        use std::f64::consts::PI;
        GaitProfile {
            speed: 8.0,
            stride_period: 0.4,
            height: 0.7,
            bob: 0.0,
            start_x: None,
            joints: vec![
                wave("theta_1", 0.0, 0.05, 0.0),
                wave("theta_2", 0.0, 0.1, PI),
                wave("psi_2", 0.0, 0.05, 0.5),
                wave("theta_3", 0.0, 0.12, 0.0),
                wave("theta_4", 0.0, 0.12, 0.3),
                wave("psi_4", 0.0, 0.05, 1.0),
                wave("theta_5", 0.2, 0.2, PI),
                wave("psi_5", 0.0, 0.3, 0.7),
                wave("theta_6", 0.1, 0.2, 2.0),
                wave("psi_6", 0.0, 0.3, 1.2),
                wave("theta_7", 0.0, 0.6, 0.0),
                wave("theta_8", -0.6, 0.5, -PI / 2.0),
                wave("theta_9", 0.0, 0.6, 0.4),
                wave("theta_10", -0.6, 0.5, 0.4 - PI / 2.0),
                wave("theta_11", 0.0, 0.6, PI),
                wave("theta_12", 0.6, 0.5, PI / 2.0),
                wave("theta_13", 0.0, 0.6, PI + 0.4),
                wave("theta_14", 0.6, 0.5, PI / 2.0 + 0.4),
            ],
        }
    }

    /// Motionless cheetah standing at the origin.
    pub fn stationary() -> Self {
        GaitProfile {
            speed: 0.0,
            bob: 0.0,
            start_x: Some(0.0),
            joints: Vec::new(),
            ..Self::gallop()
        }
    }

    fn resolve(&self, model: &SkeletonModel) -> Result<Vec<(usize, &JointWave)>> {
        if !(self.stride_period > 0.0) || !self.speed.is_finite() || !self.height.is_finite() {
            return Err(Error::invalid(
                "gait: stride_period must be positive and speed/height finite",
            ));
        }
        self.joints
            .iter()
            .map(|w| {
                let i = model.parameter_index(&w.parameter).ok_or_else(|| {
                    Error::invalid(format!("gait: unknown parameter '{}'", w.parameter))
                })?;
                let b = model.bounds[i];
                let (lo, hi) = (w.offset - w.amplitude.abs(), w.offset + w.amplitude.abs());
                if !(b.contains(lo) && b.contains(hi)) {
                    return Err(Error::invalid(format!(
                        "gait: '{}' spans [{lo:.3}, {hi:.3}] outside its bounds [{}, {}]",
                        w.parameter, b.min, b.max
                    )));
                }
                if model.translation.contains(&i) {
                    return Err(Error::invalid(format!(
                        "gait: '{}' is a translation; use speed/height instead",
                        w.parameter
                    )));
                }
                Ok((i, w))
            })
            .collect()
    }
}

/// Ground-truth run with exact projections.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub poses: Vec<GeneralizedPose>,
    pub markers: Vec<MarkerCloud>,
    /// Exact projections of in-image markers, likelihood 1.
    pub clean_obs: ObservationSet,
    pub rig: CameraRig,
}

pub fn generate_run(
    model: &SkeletonModel,
    rig: &CameraRig,
    n_frames: usize,
    profile: &GaitProfile,
) -> Result<SimRun> {
    if n_frames < 2 {
        return Err(Error::invalid("synth: a run needs at least 2 frames"));
    }
    let waves = profile.resolve(model)?;
    let dt = rig.dt();
    let start_x = profile
        .start_x
        .unwrap_or(-0.5 * profile.speed * dt * (n_frames - 1) as f64);
    let [ix, iy, iz] = model.translation;
    let poses: Vec<GeneralizedPose> = (0..n_frames)
        .map(|k| {
            let t = k as f64 * dt;
            let cycle = TAU * t / profile.stride_period;
            let mut q = GeneralizedPose::zeros();
            q[ix] = start_x + profile.speed * t;
            q[iy] = 0.0;
            q[iz] = profile.height + profile.bob * (2.0 * cycle).sin();
            for (i, w) in &waves {
                q[*i] = w.offset + w.amplitude * (cycle + w.phase).sin();
            }
            q
        })
        .collect();
    if let Some(k) = poses.iter().position(|q| !model.is_feasible(q)) {
        return Err(Error::invalid(format!("synth: pose at frame {k} violates bounds")));
    }
    let markers: Vec<MarkerCloud> = poses.iter().map(|q| model.forward_kinematics(q)).collect();
    let n_markers = model.markers.len();
    let frames = markers
        .iter()
        .enumerate()
        .map(|(k, cloud)| {
            let mut f = FrameObservations::empty(k, rig.len(), n_markers);
            for (c, cam) in rig.cameras.iter().enumerate() {
                for (m, p) in cloud.0.iter().enumerate() {
                    if let Some(px) = cam.project(p).pixel().filter(|px| cam.in_image(px)) {
                        f.points[c * n_markers + m] = Some(Keypoint::new(px.x, px.y, 1.0));
                    }
                }
            }
            f
        })
        .collect();
    Ok(SimRun {
        poses,
        markers,
        clean_obs: ObservationSet {
            n_cameras: rig.len(),
            n_markers,
            frames,
        },
        rig: rig.clone(),
    })
}

/// `c_noisy = c + n + o` with `n ~ N(0, σ_n²)` on every coordinate and,
/// with probability `p_o` per point, `o ~ N(0, σ_o²)` on both coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionParams {
    pub sigma_n: f64,
    pub p_o: f64,
    pub sigma_o: f64,
    pub seed: u64,
    /// Likelihood written for points that received an outlier.
    #[serde(default = "one")]
    pub outlier_likelihood: f64,
}

fn one() -> f64 {
    1.0
}

impl CorruptionParams {
    pub fn new(sigma_n: f64, p_o: f64, sigma_o: f64, seed: u64) -> Self {
        CorruptionParams {
            sigma_n,
            p_o,
            sigma_o,
            seed,
            outlier_likelihood: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_n >= 0.0 && self.sigma_o >= 0.0 && self.sigma_n.is_finite() && self.sigma_o.is_finite()) {
            return Err(Error::invalid("corruption: sigma_n and sigma_o must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.p_o) || !(0.0..=1.0).contains(&self.outlier_likelihood) {
            return Err(Error::invalid("corruption: p_o and outlier_likelihood must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Independent stream for one 2D point, so results do not depend on
/// iteration order or thread count.
pub fn point_rng(seed: u64, frame: usize, camera: usize, marker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((frame as u64) << 24) | ((camera as u64) << 12) | marker as u64);
    rng
}

/// Applies the corruption model. Each point draws, in order: `n_u`, `n_v`,
/// the outlier coin, `o_u`, `o_v`; all five are always drawn.
pub fn corrupt(clean: &ObservationSet, p: &CorruptionParams) -> ObservationSet {
    let n_markers = clean.n_markers;
    let frames = clean
        .frames
        .par_iter()
        .map(|f| {
            let points = f
                .points
                .iter()
                .enumerate()
                .map(|(slot, kp)| {
                    kp.map(|kp| {
                        let mut rng = point_rng(p.seed, f.frame, slot / n_markers, slot % n_markers);
                        let nu: f64 = rng.sample(StandardNormal);
                        let nv: f64 = rng.sample(StandardNormal);
                        let coin: f64 = rng.random();
                        let ou: f64 = rng.sample(StandardNormal);
                        let ov: f64 = rng.sample(StandardNormal);
                        let mut out = Keypoint::new(kp.u + p.sigma_n * nu, kp.v + p.sigma_n * nv, kp.likelihood);
                        if coin < p.p_o {
                            out.u += p.sigma_o * ou;
                            out.v += p.sigma_o * ov;
                            out.likelihood = p.outlier_likelihood;
                        }
                        out
                    })
                })
                .collect();
            FrameObservations { frame: f.frame, points }
        })
        .collect();
    ObservationSet {
        n_cameras: clean.n_cameras,
        n_markers,
        frames,
    }
}

/// One entry of the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub corruption: CorruptionParams,
}

pub fn dataset_name(sigma_n: f64, p_o: f64) -> String {
    format!("sn{sigma_n}_po{p_o}")
}

/// σ_n ∈ {0, 5, 10} px × p_o ∈ {0, 0.02, 0.05}, σ_o = 100 px. Every dataset
/// shares the seed, so noise draws are paired across the grid.
pub fn evaluation_grid(seed: u64) -> Vec<Dataset> {
    grid(&[0.0, 5.0, 10.0], &[0.0, 0.02, 0.05], 100.0, seed)
}

pub fn grid(sigma_n: &[f64], p_o: &[f64], sigma_o: f64, seed: u64) -> Vec<Dataset> {
    sigma_n
        .iter()
        .flat_map(|&sn| {
            p_o.iter().map(move |&po| Dataset {
                name: dataset_name(sn, po),
                corruption: CorruptionParams::new(sn, po, sigma_o, seed),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFrame {
    pub frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<GeneralizedPose>,
    /// Canonical marker order; `None` where no ground truth exists.
    pub markers: Vec<Option<Vector3<f64>>>,
}

/// Poses and marker clouds for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub schema: String,
    pub marker_names: Vec<String>,
    pub frames: Vec<GroundTruthFrame>,
}

impl GroundTruth {
    pub fn from_run(run: &SimRun, model: &SkeletonModel) -> Self {
        GroundTruth {
            schema: GROUND_TRUTH_SCHEMA.to_string(),
            marker_names: model.markers.clone(),
            frames: run
                .poses
                .iter()
                .zip(&run.markers)
                .zip(&run.clean_obs.frames)
                .map(|((q, cloud), f)| GroundTruthFrame {
                    frame: f.frame,
                    pose: Some(*q),
                    markers: cloud.0.iter().copied().map(Some).collect(),
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let gt: GroundTruth =
            serde_json::from_str(text).map_err(|e| Error::parse("ground truth", e.to_string()))?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes")
    }

    /// Complete marker clouds, or a validation error naming the first gap.
    pub fn clouds(&self) -> Result<Vec<MarkerCloud>> {
        self.frames
            .iter()
            .map(|f| {
                f.markers
                    .iter()
                    .enumerate()
                    .map(|(m, p)| {
                        p.ok_or_else(|| {
                            Error::invalid(format!(
                                "ground truth: frame {} lacks marker '{}'",
                                f.frame, self.marker_names[m]
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(MarkerCloud)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != GROUND_TRUTH_SCHEMA {
            return Err(Error::invalid(format!(
                "ground truth: expected schema '{GROUND_TRUTH_SCHEMA}', found '{}'",
                self.schema
            )));
        }
        for f in &self.frames {
            if f.markers.len() != self.marker_names.len() {
                return Err(Error::invalid(format!(
                    "ground truth: frame {} has {} markers, expected {}",
                    f.frame,
                    f.markers.len(),
                    self.marker_names.len()
                )));
            }
            if f.markers.iter().flatten().any(|m| !m.iter().all(|v| v.is_finite())) {
                return Err(Error::invalid(format!("ground truth: frame {} has non-finite markers", f.frame)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_run_repeats_the_pose() {
        let model = SkeletonModel::cheetah();
        let rig = CameraRig::synthetic();
        let run = generate_run(&model, &rig, 2, &GaitProfile::stationary()).unwrap();
        assert_eq!(run.poses[0], run.poses[1]);
    }

    #[test]
    fn out_of_bounds_profile_is_rejected() {
        let model = SkeletonModel::cheetah();
        let rig = CameraRig::synthetic();
        let mut profile = GaitProfile::gallop();
        profile.joints.push(wave("theta_8", 0.0, 0.5, 0.0));
        assert!(generate_run(&model, &rig, 10, &profile).unwrap_err().is_validation());
    }

    #[test]
    fn point_streams_are_distinct() {
        let a: u64 = point_rng(1, 0, 0, 1).random();
        let b: u64 = point_rng(1, 0, 1, 0).random();
        let c: u64 = point_rng(1, 1, 0, 0).random();
        assert!(a != b && b != c && a != c);
    }
}
