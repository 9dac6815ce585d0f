//! Self-contained scene documents for the inspection viewer, and the
//! corrections it writes back.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::io::{read_text, write_atomic};
use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::metrics::{pixel_errors, Distribution};
use crate::observation::{FrameDiagnostics, Method, ObservationSet, SolverSummary, TrajectoryEstimate};
use crate::skeleton::{GeneralizedPose, SkeletonModel};
use crate::synth::{GroundTruth, GroundTruthFrame, GROUND_TRUTH_SCHEMA};

pub const SCENE_SCHEMA: &str = "kinetrack.scene/1";
pub const CORRECTION_SCHEMA: &str = "kinetrack.corrections/1";
/// Adjustments above this (m) count as large outliers.
pub const LARGE_ADJUSTMENT: f64 = 0.1;
/// Name of the root node in link lists; it is a pose position, not a marker.
pub const ROOT: &str = "root";

/// One drawable segment. `from` is a marker name or [`ROOT`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneLink {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSkeleton {
    pub markers: Vec<String>,
    pub parameters: Vec<String>,
    /// Name of the root node (its position is the pose translation).
    pub root_node: String,
    pub links: Vec<SceneLink>,
}

impl SceneSkeleton {
    pub fn from_model(model: &SkeletonModel) -> Self {
        let links = model
            .links
            .iter()
            .enumerate()
            .map(|(m, link)| SceneLink {
                from: link
                    .origin
                    .map_or_else(|| ROOT.to_string(), |o| model.markers[o].clone()),
                to: model.markers[m].clone(),
            })
            .collect();
        SceneSkeleton {
            markers: model.markers.clone(),
            parameters: model.parameter_names.clone(),
            root_node: model.joints[0].name.clone(),
            links,
        }
    }
}

/// Observed detection against the reprojected estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneResidual {
    /// Calibration id.
    pub camera: u32,
    pub marker: String,
    pub observed: [f64; 2],
    pub projected: [f64; 2],
    pub likelihood: f64,
    /// Euclidean pixel distance.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFrame {
    pub frame: usize,
    #[serde(default)]
    pub pose: Option<GeneralizedPose>,
    /// Root position; absent when the estimate has no pose.
    #[serde(default)]
    pub root: Option<[f64; 3]>,
    /// Canonical marker order.
    pub markers: Vec<Option<[f64; 3]>>,
    pub residuals: Vec<SceneResidual>,
    pub diagnostics: FrameDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDocument {
    pub schema: String,
    pub method: Method,
    #[serde(default)]
    pub dataset: String,
    pub skeleton: SceneSkeleton,
    #[serde(with = "crate::camera::embedded")]
    pub rig: CameraRig,
    pub frames: Vec<SceneFrame>,
    #[serde(default)]
    pub solver: Vec<SolverSummary>,
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Builds the document: estimate, skeleton, rig, and residuals against `obs`.
pub fn build_scene(
    dataset: &str,
    est: &TrajectoryEstimate,
    obs: &ObservationSet,
    rig: &CameraRig,
    model: &SkeletonModel,
) -> Result<SceneDocument> {
    if est.len() != obs.len() {
        return Err(Error::invalid(format!(
            "scene: estimate has {} frames, observations {}",
            est.len(),
            obs.len()
        )));
    }
    let mut residuals: Vec<Vec<SceneResidual>> = vec![Vec::new(); est.len()];
    for e in pixel_errors(est, obs, rig) {
        let kp = obs.get(e.frame_pos, e.camera, e.marker).expect("pixel error has a detection");
        let p = est.frames[e.frame_pos].markers[e.marker].expect("pixel error has an estimate");
        let px: Vector2<f64> = rig.cameras[e.camera].project(&p).pixel().expect("in front of camera");
        residuals[e.frame_pos].push(SceneResidual {
            camera: rig.cameras[e.camera].id,
            marker: model.markers[e.marker].clone(),
            observed: [kp.u, kp.v],
            projected: [px.x, px.y],
            likelihood: kp.likelihood,
            error: e.error,
        });
    }
    let [ix, iy, iz] = model.translation;
    let frames = est
        .frames
        .iter()
        .zip(residuals)
        .map(|(f, residuals)| SceneFrame {
            frame: f.frame,
            pose: f.pose,
            root: f.pose.map(|q| [q[ix], q[iy], q[iz]]),
            markers: f.markers.iter().map(|m| m.as_ref().map(arr)).collect(),
            residuals,
            diagnostics: f.diagnostics.clone(),
        })
        .collect();
    Ok(SceneDocument {
        schema: SCENE_SCHEMA.to_string(),
        method: est.method,
        dataset: dataset.to_string(),
        skeleton: SceneSkeleton::from_model(model),
        rig: rig.clone(),
        frames,
        solver: est.solver.clone(),
    })
}

impl SceneDocument {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scene serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SceneDocument =
            serde_json::from_str(text).map_err(|e| Error::parse("scene", e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCENE_SCHEMA {
            return Err(Error::invalid(format!(
                "scene: expected schema '{SCENE_SCHEMA}', found '{}'",
                self.schema
            )));
        }
        let n = self.skeleton.markers.len();
        for f in &self.frames {
            if f.markers.len() != n {
                return Err(Error::invalid(format!(
                    "scene: frame {} has {} markers, skeleton has {n}",
                    f.frame,
                    f.markers.len()
                )));
            }
        }
        for l in &self.skeleton.links {
            for end in [&l.from, &l.to] {
                if end != ROOT && !self.skeleton.markers.contains(end) {
                    return Err(Error::invalid(format!("scene: link references unknown marker '{end}'")));
                }
            }
        }
        Ok(())
    }
}

/// Writes the scene for `est` to `path` atomically.
pub fn export_scene(
    dataset: &str,
    est: &TrajectoryEstimate,
    obs: &ObservationSet,
    rig: &CameraRig,
    model: &SkeletonModel,
    path: &Path,
) -> Result<SceneDocument> {
    let doc = build_scene(dataset, est, obs, rig, model)?;
    write_atomic(path, doc.to_json().as_bytes())?;
    Ok(doc)
}

/// A human correction of one marker in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionRecord {
    pub frame: usize,
    pub marker: String,
    /// Position before the edit (m).
    pub original: [f64; 3],
    /// Position after the edit (m).
    pub corrected: [f64; 3],
    pub author: String,
    /// ISO-8601, as written by the editor.
    pub timestamp: String,
}

impl CorrectionRecord {
    pub fn magnitude(&self) -> f64 {
        (Vector3::from(self.corrected) - Vector3::from(self.original)).norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionFile {
    pub schema: String,
    #[serde(default)]
    pub scene: Option<String>,
    pub corrections: Vec<CorrectionRecord>,
}

impl CorrectionFile {
    pub fn new(corrections: Vec<CorrectionRecord>) -> Self {
        CorrectionFile {
            schema: CORRECTION_SCHEMA.to_string(),
            scene: None,
            corrections,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: CorrectionFile =
            serde_json::from_str(text).map_err(|e| Error::parse("corrections", e.to_string()))?;
        if f.schema != CORRECTION_SCHEMA {
            return Err(Error::invalid(format!(
                "corrections: expected schema '{CORRECTION_SCHEMA}', found '{}'",
                f.schema
            )));
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("corrections serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// Position of the record in the input list.
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerAdjustments {
    pub marker: String,
    pub adjustments: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub applied: usize,
    pub rejected: Vec<Rejection>,
    pub large_threshold: f64,
    pub large_count: usize,
    /// `large_count / applied`; zero when nothing was applied.
    pub large_fraction: f64,
    pub per_marker: Vec<MarkerAdjustments>,
}

impl CorrectionSummary {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("summary serializes");
        text.push('\n');
        text
    }
}

/// Applies corrections to the scene's markers. Records naming a frame or
/// marker the scene lacks, or carrying non-finite positions, are rejected
/// one by one; the rest are applied in order.
pub fn apply_corrections(scene: &SceneDocument, corrections: &[CorrectionRecord]) -> (GroundTruth, CorrectionSummary) {
    let mut frames: Vec<GroundTruthFrame> = scene
        .frames
        .iter()
        .map(|f| GroundTruthFrame {
            frame: f.frame,
            pose: None,
            markers: f.markers.iter().map(|m| m.map(Vector3::from)).collect(),
        })
        .collect();
    let names = &scene.skeleton.markers;
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut rejected = Vec::new();
    let mut applied = 0;
    let mut large = 0;
    for (index, c) in corrections.iter().enumerate() {
        let reject = |reason: String| Rejection { index, reason };
        let Some(pos) = frames.iter().position(|f| f.frame == c.frame) else {
            rejected.push(reject(format!("frame {} is not in the scene", c.frame)));
            continue;
        };
        let Some(m) = names.iter().position(|n| *n == c.marker) else {
            rejected.push(reject(format!("unknown marker '{}'", c.marker)));
            continue;
        };
        if !c.original.iter().chain(&c.corrected).all(|v| v.is_finite()) {
            rejected.push(reject("non-finite position".to_string()));
            continue;
        }
        frames[pos].markers[m] = Some(Vector3::from(c.corrected));
        let mag = c.magnitude();
        per[m].push(mag);
        applied += 1;
        if mag > LARGE_ADJUSTMENT {
            large += 1;
        }
    }
    let gt = GroundTruth {
        schema: GROUND_TRUTH_SCHEMA.to_string(),
        marker_names: names.clone(),
        frames,
    };
    let summary = CorrectionSummary {
        applied,
        rejected,
        large_threshold: LARGE_ADJUSTMENT,
        large_count: large,
        large_fraction: if applied > 0 { large as f64 / applied as f64 } else { 0.0 },
        per_marker: names
            .iter()
            .zip(&per)
            .filter(|(_, v)| !v.is_empty())
            .map(|(n, v)| MarkerAdjustments {
                marker: n.clone(),
                adjustments: Distribution::of(v),
            })
            .collect(),
    };
    (gt, summary)
}
