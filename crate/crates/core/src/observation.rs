//! 2D keypoint observations and reconstructed trajectories.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{GeneralizedPose, MarkerCloud};

/// One detection: pixel coordinates and detector confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub likelihood: f64,
}

impl Keypoint {
    pub fn new(u: f64, v: f64, likelihood: f64) -> Self {
        Keypoint { u, v, likelihood }
    }

    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

/// A single row of an observation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame: usize,
    /// Camera position in the rig (not the calibration id).
    pub camera: usize,
    pub marker: usize,
    pub u: f64,
    pub v: f64,
    pub likelihood: f64,
}

impl Observation {
    pub fn keypoint(&self) -> Keypoint {
        Keypoint::new(self.u, self.v, self.likelihood)
    }
}

/// All detections of one frame, camera-major then marker.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservations {
    pub frame: usize,
    pub points: Vec<Option<Keypoint>>,
}

impl FrameObservations {
    pub fn empty(frame: usize, n_cameras: usize, n_markers: usize) -> Self {
        FrameObservations {
            frame,
            points: vec![None; n_cameras * n_markers],
        }
    }
}

/// Detections for a contiguous run of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub n_cameras: usize,
    pub n_markers: usize,
    pub frames: Vec<FrameObservations>,
}

impl ObservationSet {
    pub fn new(n_cameras: usize, n_markers: usize) -> Self {
        ObservationSet {
            n_cameras,
            n_markers,
            frames: Vec::new(),
        }
    }

    /// Empty set spanning frames `first..first + count`.
    pub fn with_frames(n_cameras: usize, n_markers: usize, first: usize, count: usize) -> Self {
        ObservationSet {
            n_cameras,
            n_markers,
            frames: (first..first + count)
                .map(|f| FrameObservations::empty(f, n_cameras, n_markers))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    #[inline]
    pub fn slot(&self, camera: usize, marker: usize) -> usize {
        camera * self.n_markers + marker
    }

    pub fn get(&self, frame_pos: usize, camera: usize, marker: usize) -> Option<&Keypoint> {
        self.frames[frame_pos].points[self.slot(camera, marker)].as_ref()
    }

    pub fn set(&mut self, frame_pos: usize, camera: usize, marker: usize, kp: Option<Keypoint>) {
        let slot = self.slot(camera, marker);
        self.frames[frame_pos].points[slot] = kp;
    }

    /// Rows in frame, camera, marker order.
    pub fn rows(&self) -> impl Iterator<Item = Observation> + '_ {
        self.frames.iter().flat_map(move |f| {
            f.points.iter().enumerate().filter_map(move |(slot, kp)| {
                kp.map(|kp| Observation {
                    frame: f.frame,
                    camera: slot / self.n_markers,
                    marker: slot % self.n_markers,
                    u: kp.u,
                    v: kp.v,
                    likelihood: kp.likelihood,
                })
            })
        })
    }

    /// Builds a contiguous set from rows. Frames between the smallest and
    /// largest index are materialized even when they carry no rows.
    pub fn from_rows(
        rows: impl IntoIterator<Item = Observation>,
        n_cameras: usize,
        n_markers: usize,
    ) -> Result<Self> {
        let rows: Vec<Observation> = rows.into_iter().collect();
        let Some(first) = rows.iter().map(|r| r.frame).min() else {
            return Ok(ObservationSet::new(n_cameras, n_markers));
        };
        let last = rows.iter().map(|r| r.frame).max().unwrap_or(first);
        let mut set = ObservationSet::with_frames(n_cameras, n_markers, first, last - first + 1);
        for r in rows {
            if r.camera >= n_cameras || r.marker >= n_markers {
                return Err(Error::invalid(format!(
                    "observation (frame {}, camera {}, marker {}) out of range",
                    r.frame, r.camera, r.marker
                )));
            }
            let pos = r.frame - first;
            if set.get(pos, r.camera, r.marker).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate observation (frame {}, camera {}, marker {})",
                    r.frame, r.camera, r.marker
                )));
            }
            set.set(pos, r.camera, r.marker, Some(r.keypoint()));
        }
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.frames.windows(2) {
            if w[1].frame != w[0].frame + 1 {
                return Err(Error::invalid(format!(
                    "frames are not contiguous ({} followed by {})",
                    w[0].frame, w[1].frame
                )));
            }
        }
        for obs in self.rows() {
            if !(obs.u.is_finite() && obs.v.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite pixel at frame {}, camera {}, marker {}",
                    obs.frame, obs.camera, obs.marker
                )));
            }
            if !(0.0..=1.0).contains(&obs.likelihood) {
                return Err(Error::invalid(format!(
                    "likelihood {} outside [0, 1] at frame {}, camera {}, marker {}",
                    obs.likelihood, obs.frame, obs.camera, obs.marker
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "TRI")]
    Triangulation,
    #[serde(rename = "EKF")]
    Ekf,
    #[serde(rename = "FTE")]
    Fte,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Triangulation, Method::Ekf, Method::Fte];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Triangulation => "TRI",
            Method::Ekf => "EKF",
            Method::Fte => "FTE",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Per-frame estimator diagnostics. Fields that do not apply to a method stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    /// Markers with a 3D estimate this frame.
    pub valid_markers: usize,
    /// EKF: measurement channels stacked into the update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    /// EKF: channels whose innovation was zeroed by the gate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gated_channels: Option<usize>,
    /// EKF: the update was skipped because S was singular.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped_update: bool,
    /// FTE: ‖w_k / σ_model‖ for this frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_disturbance: Option<f64>,
    /// FTE: RMS of the masked measurement residuals v (px).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement_residual_rms: Option<f64>,
    /// TRI: robust cost per marker (absent for unreconstructed markers).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_costs: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEstimate {
    pub frame: usize,
    pub pose: Option<GeneralizedPose>,
    pub velocity: Option<GeneralizedPose>,
    pub acceleration: Option<GeneralizedPose>,
    /// Canonical marker order; `None` where a marker could not be reconstructed.
    pub markers: Vec<Option<Vector3<f64>>>,
    pub diagnostics: FrameDiagnostics,
}

impl FrameEstimate {
    pub fn from_cloud(frame: usize, pose: GeneralizedPose, cloud: &MarkerCloud) -> Self {
        FrameEstimate {
            frame,
            pose: Some(pose),
            velocity: None,
            acceleration: None,
            markers: cloud.0.iter().copied().map(Some).collect(),
            diagnostics: FrameDiagnostics {
                valid_markers: cloud.len(),
                ..Default::default()
            },
        }
    }
}

/// Batch solver outcome (FTE).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub iterations: usize,
    pub converged: bool,
    /// ∞-norm of the projected gradient at the returned iterate.
    pub kkt: f64,
    pub objective: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEstimate {
    pub method: Method,
    pub frames: Vec<FrameEstimate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub solver: Vec<SolverSummary>,
}

impl TrajectoryEstimate {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn marker(&self, frame_pos: usize, marker: usize) -> Option<&Vector3<f64>> {
        self.frames[frame_pos].markers[marker].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let mut set = ObservationSet::with_frames(2, 3, 5, 2);
        set.set(0, 1, 2, Some(Keypoint::new(1.0, 2.0, 0.9)));
        set.set(1, 0, 0, Some(Keypoint::new(3.0, 4.0, 0.1)));
        let rows: Vec<_> = set.rows().collect();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].frame, rows[0].camera, rows[0].marker), (5, 1, 2));
        let again = ObservationSet::from_rows(rows, 2, 3).unwrap();
        assert_eq!(again, set);
    }

    #[test]
    fn rejects_bad_likelihood_and_duplicates() {
        let row = Observation {
            frame: 0,
            camera: 0,
            marker: 0,
            u: 1.0,
            v: 1.0,
            likelihood: 1.5,
        };
        assert!(ObservationSet::from_rows([row], 1, 1).is_err());
        let row = Observation { likelihood: 0.5, ..row };
        assert!(ObservationSet::from_rows([row, row], 1, 1).is_err());
    }
}
