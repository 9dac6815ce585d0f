//! Per-frame robust triangulation of individual markers.
//!
//! Each marker in each frame is reconstructed on its own: detections below
//! the likelihood threshold are dropped, the best pairwise ray midpoint
//! seeds the point, and Levenberg–Marquardt refines it under a Cauchy loss
//! on the per-view reprojection error.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::camera::{CameraModel, CameraRig};
use crate::observation::{
    FrameDiagnostics, FrameEstimate, Method, Observation, ObservationSet, TrajectoryEstimate,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Cauchy,
    /// Plain squared error, kept for comparison against the robust fit.
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriangulationConfig {
    pub likelihood_threshold: f64,
    /// Cauchy scale σ_c in pixels.
    pub cauchy_scale: f64,
    pub loss: Loss,
    pub max_iterations: usize,
    /// Convergence threshold on the LM step norm (m).
    pub step_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        TriangulationConfig {
            likelihood_threshold: 0.5,
            cauchy_scale: 5.0,
            loss: Loss::Cauchy,
            max_iterations: 100,
            step_tolerance: 1e-10,
            initial_damping: 1e-3,
        }
    }
}

impl TriangulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cauchy_scale > 0.0 && self.step_tolerance > 0.0 && self.initial_damping > 0.0) {
            return Err(Error::invalid(
                "triangulation: cauchy_scale, step_tolerance and initial_damping must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.likelihood_threshold) {
            return Err(Error::invalid("triangulation: likelihood_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl TriangulationConfig {
    /// Robust cost of one view with squared residual norm `sq`, and the IRLS weight.
    fn view_cost(&self, sq: f64) -> (f64, f64) {
        match self.loss {
            Loss::Cauchy => {
                let s2 = self.cauchy_scale * self.cauchy_scale;
                (0.5 * s2 * (sq / s2).ln_1p(), 1.0 / (1.0 + sq / s2))
            }
            Loss::Squared => (0.5 * sq, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub marker: usize,
    pub position: Vector3<f64>,
    pub n_views: usize,
    /// Final robust cost.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointOutcome {
    Estimate(PointEstimate),
    /// Fewer than two cameras passed the likelihood threshold.
    InsufficientViews { marker: usize, n_views: usize },
}

impl PointOutcome {
    pub fn estimate(&self) -> Option<&PointEstimate> {
        match self {
            PointOutcome::Estimate(e) => Some(e),
            PointOutcome::InsufficientViews { .. } => None,
        }
    }
}

struct View<'a> {
    camera: &'a CameraModel,
    pixel: Vector2<f64>,
}

/// Total robust cost of `point` over the views; infinite if any view sees it from behind.
fn total_cost(point: &Vector3<f64>, views: &[View<'_>], cfg: &TriangulationConfig) -> f64 {
    let mut cost = 0.0;
    for view in views {
        match view.camera.project(point).pixel() {
            Some(px) => cost += cfg.view_cost((px - view.pixel).norm_squared()).0,
            None => return f64::INFINITY,
        }
    }
    cost
}

/// Midpoint of the shortest segment between two rays, or `None` for parallel rays.
pub fn ray_midpoint(
    (o1, d1): (Vector3<f64>, Vector3<f64>),
    (o2, d2): (Vector3<f64>, Vector3<f64>),
) -> Option<Vector3<f64>> {
    let w0 = o1 - o2;
    let b = d1.dot(&d2);
    let d = d1.dot(&w0);
    let e = d2.dot(&w0);
    let denom = d1.norm_squared() * d2.norm_squared() - b * b;
    if denom.abs() < 1e-12 {
        return None;
    }
    let s = (b * e - d2.norm_squared() * d) / denom;
    let t = (d1.norm_squared() * e - b * d) / denom;
    Some(0.5 * ((o1 + s * d1) + (o2 + t * d2)))
}

fn initial_point(views: &[View<'_>], cfg: &TriangulationConfig) -> Vector3<f64> {
    let rays: Vec<_> = views.iter().map(|v| v.camera.ray(&v.pixel)).collect();
    let mut best: Option<(f64, Vector3<f64>)> = None;
    let mut fallback = None;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            let Some(p) = ray_midpoint(rays[i], rays[j]) else {
                continue;
            };
            fallback.get_or_insert(p);
            let cost = total_cost(&p, views, cfg);
            if cost.is_finite() && best.is_none_or(|(c, _)| cost < c) {
                best = Some((cost, p));
            }
        }
    }
    best.map(|(_, p)| p)
        .or(fallback)
        .unwrap_or_else(|| rays[0].0 + rays[0].1)
}

/// Reconstructs one marker in one frame.
///
/// All observations must share frame and marker; `camera` indexes `rig.cameras`.
pub fn triangulate_point(
    obs: &[Observation],
    rig: &CameraRig,
    cfg: &TriangulationConfig,
) -> PointOutcome {
    let marker = obs.first().map_or(0, |o| o.marker);
    debug_assert!(obs
        .iter()
        .all(|o| o.marker == marker && o.frame == obs[0].frame));
    let views: Vec<View<'_>> = obs
        .iter()
        .filter(|o| o.likelihood >= cfg.likelihood_threshold)
        .map(|o| View {
            camera: &rig.cameras[o.camera],
            pixel: Vector2::new(o.u, o.v),
        })
        .collect();
    if views.len() < 2 {
        return PointOutcome::InsufficientViews {
            marker,
            n_views: views.len(),
        };
    }

    let mut point = initial_point(&views, cfg);
    let mut cost = total_cost(&point, &views, cfg);
    let mut lambda = cfg.initial_damping;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for view in &views {
            let Some((px, j)) = view.camera.project_with_jacobian(&point) else {
                continue;
            };
            let r = px - view.pixel;
            let (_, w) = cfg.view_cost(r.norm_squared());
            h += w * j.transpose() * j;
            g += w * j.transpose() * r;
        }
        if g.iter().all(|v| *v == 0.0) {
            break;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = h;
            for k in 0..3 {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = point + step;
            let new_cost = total_cost(&candidate, &views, cfg);
            if new_cost < cost {
                point = candidate;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = step.norm() >= cfg.step_tolerance;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }

    PointOutcome::Estimate(PointEstimate {
        marker,
        position: point,
        n_views: views.len(),
        residual: cost,
        iterations,
    })
}

/// Robust cost of `position` recomputed through projection.
pub fn reprojection_cost(
    obs: &[Observation],
    position: &Vector3<f64>,
    rig: &CameraRig,
    cfg: &TriangulationConfig,
) -> f64 {
    let views: Vec<View<'_>> = obs
        .iter()
        .filter(|o| o.likelihood >= cfg.likelihood_threshold)
        .map(|o| View {
            camera: &rig.cameras[o.camera],
            pixel: Vector2::new(o.u, o.v),
        })
        .collect();
    total_cost(position, &views, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePoints {
    pub frame: usize,
    pub points: Vec<PointOutcome>,
}

fn triangulate_frame(
    set: &ObservationSet,
    pos: usize,
    rig: &CameraRig,
    cfg: &TriangulationConfig,
) -> FramePoints {
    let frame = &set.frames[pos];
    let points = (0..set.n_markers)
        .map(|marker| {
            let obs: Vec<Observation> = (0..set.n_cameras)
                .filter_map(|camera| {
                    frame.points[set.slot(camera, marker)].map(|kp| Observation {
                        frame: frame.frame,
                        camera,
                        marker,
                        u: kp.u,
                        v: kp.v,
                        likelihood: kp.likelihood,
                    })
                })
                .collect();
            if obs.is_empty() {
                PointOutcome::InsufficientViews { marker, n_views: 0 }
            } else {
                triangulate_point(&obs, rig, cfg)
            }
        })
        .collect();
    FramePoints {
        frame: frame.frame,
        points,
    }
}

/// Triangulates every marker of every frame independently.
pub fn triangulate_trajectory(
    set: &ObservationSet,
    rig: &CameraRig,
    cfg: &TriangulationConfig,
) -> Vec<FramePoints> {
    (0..set.len())
        .into_par_iter()
        .map(|pos| triangulate_frame(set, pos, rig, cfg))
        .collect()
}

/// Wraps per-frame points as a trajectory estimate.
pub fn to_estimate(points: &[FramePoints]) -> TrajectoryEstimate {
    let frames = points
        .iter()
        .map(|fp| {
            let markers: Vec<_> = fp
                .points
                .iter()
                .map(|p| p.estimate().map(|e| e.position))
                .collect();
            let costs = fp
                .points
                .iter()
                .map(|p| p.estimate().map(|e| e.residual))
                .collect();
            FrameEstimate {
                frame: fp.frame,
                pose: None,
                velocity: None,
                acceleration: None,
                diagnostics: FrameDiagnostics {
                    valid_markers: markers.iter().flatten().count(),
                    point_costs: Some(costs),
                    ..Default::default()
                },
                markers,
            }
        })
        .collect();
    TrajectoryEstimate {
        method: Method::Triangulation,
        frames,
        solver: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn observe(rig: &CameraRig, p: &Vector3<f64>) -> Vec<Observation> {
        rig.cameras
            .iter()
            .enumerate()
            .map(|(camera, cam)| {
                let px = cam.project(p).pixel().unwrap();
                Observation {
                    frame: 0,
                    camera,
                    marker: 3,
                    u: px.x,
                    v: px.y,
                    likelihood: 1.0,
                }
            })
            .collect()
    }

    #[test]
    fn midpoint_of_crossing_rays() {
        let a = (Vector3::new(0.0, 0.0, 0.0), Vector3::x());
        let b = (Vector3::new(1.0, -1.0, 1.0), Vector3::y());
        let m = ray_midpoint(a, b).unwrap();
        assert!((m - Vector3::new(1.0, 0.0, 0.5)).norm() < 1e-15);
        assert!(ray_midpoint(a, (Vector3::y(), Vector3::x())).is_none());
    }

    #[test]
    fn single_view_is_insufficient() {
        let rig = CameraRig::synthetic();
        let mut obs = observe(&rig, &Vector3::new(0.2, 0.1, 0.6));
        for o in obs.iter_mut().skip(1) {
            o.likelihood = 0.3;
        }
        assert_eq!(
            triangulate_point(&obs, &rig, &TriangulationConfig::default()),
            PointOutcome::InsufficientViews {
                marker: 3,
                n_views: 1
            }
        );
    }

    #[test]
    fn exact_views_recover_point() {
        let rig = CameraRig::synthetic();
        let truth = Vector3::new(-1.3, 0.25, 0.45);
        let obs = observe(&rig, &truth);
        let est = triangulate_point(&obs, &rig, &TriangulationConfig::default());
        let est = est.estimate().unwrap();
        assert_eq!(est.n_views, 6);
        assert!((est.position - truth).norm() < 1e-6);
    }
}
