//! Scoring: 3D marker errors and reprojection RMSE / SEM / NRMSE.

use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::observation::{Method, ObservationSet, TrajectoryEstimate};
use crate::skeleton::MarkerCloud;

pub const SCORE_SCHEMA: &str = "kinetrack.score/1";

/// RMSE and SEM of per-point pixel errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionScore {
    pub count: usize,
    pub rmse: f64,
    /// Standard error of the mean of the per-point Euclidean errors.
    pub sem: f64,
    /// No estimate overlapped the ground truth; the statistics are zero.
    pub empty: bool,
}

/// RMSE and SEM (sample std, ddof = 1, over √n) of Euclidean errors.
pub fn rmse_sem(errors: &[f64]) -> ReprojectionScore {
    let n = errors.len();
    if n == 0 {
        return ReprojectionScore {
            count: 0,
            rmse: 0.0,
            sem: 0.0,
            empty: true,
        };
    }
    let nf = n as f64;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / nf).sqrt();
    let sem = if n < 2 {
        0.0
    } else {
        let mean = errors.iter().sum::<f64>() / nf;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        var.sqrt() / nf.sqrt()
    };
    ReprojectionScore {
        count: n,
        rmse,
        sem,
        empty: false,
    }
}

/// A 2D comparison point: where the estimate lands against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelError {
    pub frame_pos: usize,
    pub camera: usize,
    pub marker: usize,
    pub error: f64,
}

/// Pixel errors for every ground-truth point with an estimated marker in front of the camera.
pub fn pixel_errors(est: &TrajectoryEstimate, gt2d: &ObservationSet, rig: &CameraRig) -> Vec<PixelError> {
    let mut out = Vec::new();
    for (pos, frame) in gt2d.frames.iter().enumerate() {
        let Some(fe) = est.frames.iter().find(|f| f.frame == frame.frame) else {
            continue;
        };
        for (slot, kp) in frame.points.iter().enumerate() {
            let Some(kp) = kp else { continue };
            let (camera, marker) = (slot / gt2d.n_markers, slot % gt2d.n_markers);
            let Some(p) = fe.markers.get(marker).copied().flatten() else {
                continue;
            };
            if let Some(px) = rig.cameras[camera].project(&p).pixel() {
                out.push(PixelError {
                    frame_pos: pos,
                    camera,
                    marker,
                    error: (px - kp.pixel()).norm(),
                });
            }
        }
    }
    out
}

pub fn reprojection_rmse(est: &TrajectoryEstimate, gt2d: &ObservationSet, rig: &CameraRig) -> ReprojectionScore {
    let errors: Vec<f64> = pixel_errors(est, gt2d, rig).iter().map(|e| e.error).collect();
    rmse_sem(&errors)
}

/// `rmse / √(height · width)`; `None` for a degenerate box.
pub fn nrmse(rmse: f64, bbox: (f64, f64)) -> Option<f64> {
    let (h, w) = bbox;
    if h > 0.0 && w > 0.0 && h.is_finite() && w.is_finite() {
        Some(rmse / (h * w).sqrt())
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NrmseScore {
    /// Mean NRMSE over (frame, camera) groups with a valid box.
    pub nrmse: f64,
    pub groups: usize,
    /// Groups skipped because their ground-truth box has zero area.
    pub degenerate: usize,
}

/// NRMSE per (frame, camera): the group's RMSE over the square root of the
/// area of the tight box around its ground-truth points, averaged over groups.
pub fn reprojection_nrmse(est: &TrajectoryEstimate, gt2d: &ObservationSet, rig: &CameraRig) -> NrmseScore {
    let errors = pixel_errors(est, gt2d, rig);
    let mut sum = 0.0;
    let mut groups = 0;
    let mut degenerate = 0;
    let mut start = 0;
    while start < errors.len() {
        let key = (errors[start].frame_pos, errors[start].camera);
        let mut end = start;
        while end < errors.len() && (errors[end].frame_pos, errors[end].camera) == key {
            end += 1;
        }
        let group = &errors[start..end];
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        let frame = &gt2d.frames[key.0];
        for m in 0..gt2d.n_markers {
            if let Some(kp) = frame.points[key.1 * gt2d.n_markers + m] {
                lo = [lo[0].min(kp.u), lo[1].min(kp.v)];
                hi = [hi[0].max(kp.u), hi[1].max(kp.v)];
            }
        }
        let errs: Vec<f64> = group.iter().map(|e| e.error).collect();
        match nrmse(rmse_sem(&errs).rmse, (hi[1] - lo[1], hi[0] - lo[0])) {
            Some(v) => {
                sum += v;
                groups += 1;
            }
            None => degenerate += 1,
        }
        start = end;
    }
    NrmseScore {
        nrmse: if groups > 0 { sum / groups as f64 } else { 0.0 },
        groups,
        degenerate,
    }
}

/// Median and median absolute deviation of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub median: f64,
    pub mad: f64,
    pub mean: f64,
    pub max: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Distribution {
    pub fn of(values: &[f64]) -> Self {
        let med = median(values);
        let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
        Distribution {
            count: values.len(),
            median: med,
            mad: median(&dev),
            mean: if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / values.len() as f64 },
            max: values.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerErrors {
    pub overall: Distribution,
    /// Canonical marker order.
    pub per_marker: Vec<Distribution>,
    /// Estimated markers that were missing (not reconstructed).
    pub missing: usize,
}

/// Euclidean 3D errors of every reconstructed marker against ground truth.
pub fn marker_error_3d(est: &TrajectoryEstimate, gt: &[MarkerCloud]) -> Result<MarkerErrors> {
    if est.len() != gt.len() {
        return Err(Error::invalid(format!(
            "metrics: estimate has {} frames, ground truth {}",
            est.len(),
            gt.len()
        )));
    }
    let n_markers = gt.first().map_or(0, |c| c.len());
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); n_markers];
    let mut missing = 0;
    for (fe, cloud) in est.frames.iter().zip(gt) {
        if fe.markers.len() != cloud.len() {
            return Err(Error::invalid(format!(
                "metrics: frame {} has {} markers, ground truth {}",
                fe.frame,
                fe.markers.len(),
                cloud.len()
            )));
        }
        for (m, (p, truth)) in fe.markers.iter().zip(&cloud.0).enumerate() {
            match p {
                Some(p) => per[m].push((p - truth).norm()),
                None => missing += 1,
            }
        }
    }
    let all: Vec<f64> = per.iter().flatten().copied().collect();
    Ok(MarkerErrors {
        overall: Distribution::of(&all),
        per_marker: per.iter().map(|v| Distribution::of(v)).collect(),
        missing,
    })
}

/// Scores of one method on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub dataset: String,
    pub method: Method,
    pub reprojection: ReprojectionScore,
    pub nrmse: NrmseScore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_3d: Option<MarkerErrors>,
}

impl ScoreEntry {
    pub fn compute(
        dataset: &str,
        est: &TrajectoryEstimate,
        gt2d: &ObservationSet,
        gt3d: Option<&[MarkerCloud]>,
        rig: &CameraRig,
    ) -> Result<Self> {
        Ok(ScoreEntry {
            dataset: dataset.to_string(),
            method: est.method,
            reprojection: reprojection_rmse(est, gt2d, rig),
            nrmse: reprojection_nrmse(est, gt2d, rig),
            error_3d: gt3d.map(|gt| marker_error_3d(est, gt)).transpose()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreReport {
    pub schema: String,
    pub marker_names: Vec<String>,
    pub entries: Vec<ScoreEntry>,
}

impl ScoreReport {
    pub fn new(marker_names: Vec<String>) -> Self {
        ScoreReport {
            schema: SCORE_SCHEMA.to_string(),
            marker_names,
            entries: Vec::new(),
        }
    }

    pub fn entry(&self, dataset: &str, method: Method) -> Option<&ScoreEntry> {
        self.entries.iter().find(|e| e.dataset == dataset && e.method == method)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("score report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ScoreReport =
            serde_json::from_str(text).map_err(|e| Error::parse("score report", e.to_string()))?;
        if r.schema != SCORE_SCHEMA {
            return Err(Error::invalid(format!(
                "score report: expected schema '{SCORE_SCHEMA}', found '{}'",
                r.schema
            )));
        }
        Ok(r)
    }

    /// One row per (dataset, method) plus one per (dataset, method, marker).
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "dataset", "method", "marker", "count_2d", "rmse_px", "sem_px", "nrmse", "count_3d",
            "median_m", "mad_m", "mean_m", "max_m",
        ])
        .expect("in-memory csv");
        let fmt = |v: f64| format!("{v}");
        for e in &self.entries {
            let dist_fields = |d: Option<&Distribution>| match d {
                Some(d) => [d.count.to_string(), fmt(d.median), fmt(d.mad), fmt(d.mean), fmt(d.max)],
                None => Default::default(),
            };
            let overall = dist_fields(e.error_3d.as_ref().map(|x| &x.overall));
            let mut row = vec![
                e.dataset.clone(),
                e.method.tag().to_string(),
                "*".to_string(),
                e.reprojection.count.to_string(),
                fmt(e.reprojection.rmse),
                fmt(e.reprojection.sem),
                fmt(e.nrmse.nrmse),
            ];
            row.extend(overall);
            w.write_record(&row).expect("in-memory csv");
            if let Some(x) = &e.error_3d {
                for (name, d) in self.marker_names.iter().zip(&x.per_marker) {
                    let mut row = vec![
                        e.dataset.clone(),
                        e.method.tag().to_string(),
                        name.clone(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                    ];
                    row.extend(dist_fields(Some(d)));
                    w.write_record(&row).expect("in-memory csv");
                }
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}
