use rayon::prelude::*;

use super::problem::{FteConfig, FteProblem, FteVariables, VIRTUAL_BLOCKS};
use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::observation::{
    FrameDiagnostics, FrameEstimate, Method, ObservationSet, SolverSummary, TrajectoryEstimate,
};
use crate::skeleton::{GeneralizedPose, SkeletonModel, POSE_DIM};

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const LAMBDA_MIN: f64 = 1e-12;
const LAMBDA_MAX: f64 = 1e12;
/// Consecutive iterations without meaningful progress before declaring a stall.
/// Relative size below which a change in the objective is indistinguishable from rounding.
const ROUNDOFF: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct FteSolution {
    pub z: Vec<f64>,
    pub summary: SolverSummary,
}

/// Projected, damped Gauss–Newton on the bound-constrained problem.
///
/// Variables at a bound whose gradient pushes outward are pinned; the rest
/// take a Marquardt-damped step that is projected back onto the box and
/// accepted by Armijo backtracking.
pub fn solve_problem(prob: &FteProblem<'_>, z0: Vec<f64>, cfg: &FteConfig) -> FteSolution {
    let mut z = z0;
    prob.project_to_bounds(&mut z);
    let n = z.len();
    let mut lambda = 1e-6;
    let (mut cost, mut grad, mut hess) = prob.linearize(&z);
    let mut kkt = prob.projected_gradient_norm(&z, &grad);
    let mut iterations = 0;
    let mut warning = None;

    while kkt >= cfg.tolerance {
        if iterations >= cfg.max_iterations {
            warning = Some(format!(
                "iteration limit {} reached with optimality {kkt:.3e}",
                cfg.max_iterations
            ));
            break;
        }
        iterations += 1;

        let active: Vec<bool> = (0..n)
            .map(|i| {
                let span = 1e-12 * (1.0 + z[i].abs());
                (z[i] - prob.lower[i] <= span && grad[i] > 0.0)
                    || (prob.upper[i] - z[i] <= span && grad[i] < 0.0)
            })
            .collect();

        let mut next = None;
        while lambda <= LAMBDA_MAX {
            let mut h = hess.clone();
            for i in 0..n {
                let d = h.diagonal(i);
                h.add_diagonal(i, lambda * d.max(1e-9) + 1e-12);
            }
            for (i, a) in active.iter().enumerate() {
                if *a {
                    h.pin(i);
                }
            }
            let Some(chol) = h.factor() else {
                lambda *= 10.0;
                continue;
            };
            let rhs: Vec<f64> = grad
                .iter()
                .zip(&active)
                .map(|(g, a)| if *a { 0.0 } else { -g })
                .collect();
            let step = chol.solve(&rhs);

            let mut t = 1.0;
            for _ in 0..MAX_BACKTRACKS {
                let mut trial: Vec<f64> = z.iter().zip(&step).map(|(x, d)| x + t * d).collect();
                prob.project_to_bounds(&mut trial);
                let decrease: f64 = grad
                    .iter()
                    .zip(trial.iter().zip(&z))
                    .map(|(g, (a, b))| g * (a - b))
                    .sum();
                if decrease >= 0.0 {
                    break;
                }
                let trial_cost = prob.objective(&trial);
                let roundoff = ROUNDOFF * (cost.abs() + 1.0);
                if trial_cost <= cost + ARMIJO * decrease && cost - trial_cost > roundoff {
                    z = trial;
                    next = Some(prob.linearize(&z));
                    break;
                }
                if (trial_cost - cost).abs() <= roundoff {
                    // The decrease is below what the objective can resolve;
                    // fall back to first-order optimality.
                    let lin = prob.linearize(&trial);
                    if prob.projected_gradient_norm(&trial, &lin.1) < kkt {
                        z = trial;
                        next = Some(lin);
                    }
                    break;
                }
                t *= 0.5;
            }
            if next.is_some() {
                if t == 1.0 {
                    lambda = (lambda * 0.1).max(LAMBDA_MIN);
                }
                break;
            }
            lambda *= 10.0;
        }

        let Some((c, g, h)) = next else {
            warning = Some(format!(
                "stalled after {iterations} iterations with optimality {kkt:.3e}"
            ));
            break;
        };
        cost = c;
        kkt = prob.projected_gradient_norm(&z, &g);
        grad = g;
        hess = h;
    }

    if let Some(w) = &warning {
        log::warn!("fte: {w}");
    }
    FteSolution {
        z,
        summary: SolverSummary {
            iterations,
            converged: kkt < cfg.tolerance,
            kkt,
            objective: cost,
            warning,
        },
    }
}

/// Solution of a full run: the per-frame estimate plus every trajectory variable.
#[derive(Debug, Clone)]
pub struct FteResult {
    pub estimate: TrajectoryEstimate,
    pub variables: FteVariables,
}

/// Initial poses for the solver: the given root poses with every other state zero.
pub fn initial_poses(model: &SkeletonModel, roots: &[GeneralizedPose]) -> Vec<GeneralizedPose> {
    roots
        .iter()
        .map(|r| {
            let mut q = GeneralizedPose::zeros();
            let root_angles = model.joints[0].slots.iter().flatten();
            for &i in model.translation.iter().chain(root_angles) {
                q[i] = r[i];
            }
            model.clamp(&q)
        })
        .collect()
}

/// Frame ranges `[start, end)` covering `n` frames with the configured overlap.
pub fn windows(n: usize, cfg: &FteConfig) -> Vec<(usize, usize)> {
    if n <= cfg.window_threshold {
        return vec![(0, n)];
    }
    let step = cfg.window_len - cfg.window_overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + cfg.window_len).min(n);
        out.push((start, end));
        if end == n {
            break;
        }
        start += step;
    }
    out
}

/// Estimates the whole run, windowing long runs and blending the overlaps linearly.
pub fn solve_fte(
    obs: &ObservationSet,
    rig: &CameraRig,
    model: &SkeletonModel,
    cfg: &FteConfig,
    init: &[GeneralizedPose],
) -> Result<FteResult> {
    cfg.validate()?;
    if init.len() != obs.len() {
        return Err(Error::invalid(format!(
            "fte: {} initial poses for {} frames",
            init.len(),
            obs.len()
        )));
    }
    if obs.is_empty() {
        return Err(Error::invalid("fte: no frames to solve"));
    }
    let spans = windows(obs.len(), cfg);
    let solved: Vec<(Vec<f64>, SolverSummary)> = spans
        .par_iter()
        .map(|&(s, e)| {
            let prob = FteProblem::new(&obs.frames[s..e], obs.n_markers, rig, model, cfg);
            let sol = solve_problem(&prob, prob.pack(&init[s..e]), cfg);
            (sol.z, sol.summary)
        })
        .collect();

    let full = FteProblem::new(&obs.frames, obs.n_markers, rig, model, cfg);
    let z = if spans.len() == 1 {
        solved[0].0.clone()
    } else {
        blend(&spans, &solved, cfg.window_overlap, obs.len())
    };
    let variables = full.variables(&z);
    let summaries: Vec<SolverSummary> = solved.into_iter().map(|(_, s)| s).collect();

    let frames = (0..obs.len())
        .map(|k| {
            let mut est = FrameEstimate::from_cloud(variables.frames[k], variables.x[k], &variables.s[k]);
            est.velocity = Some(variables.xdot[k]);
            est.acceleration = Some(variables.xddot[k]);
            let residuals: Vec<f64> = variables.v[k]
                .iter()
                .filter_map(|r| r.residual)
                .flat_map(|r| [r.x, r.y])
                .collect();
            let rms = if residuals.is_empty() {
                None
            } else {
                Some((residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt())
            };
            est.diagnostics = FrameDiagnostics {
                valid_markers: variables.s[k].len(),
                channels: Some(variables.v[k].len() * 2),
                model_disturbance: Some(variables.w[k].0.iter().map(|w| w * w).sum::<f64>().sqrt()),
                measurement_residual_rms: rms,
                ..Default::default()
            };
            est
        })
        .collect();
    Ok(FteResult {
        estimate: TrajectoryEstimate {
            method: Method::Fte,
            frames,
            solver: summaries,
        },
        variables,
    })
}

fn blend(
    spans: &[(usize, usize)],
    solved: &[(Vec<f64>, SolverSummary)],
    overlap: usize,
    n: usize,
) -> Vec<f64> {
    let mut z = vec![0.0; (n + VIRTUAL_BLOCKS) * POSE_DIM];
    z[..VIRTUAL_BLOCKS * POSE_DIM].copy_from_slice(&solved[0].0[..VIRTUAL_BLOCKS * POSE_DIM]);
    for (w, (&(start, end), (zw, _))) in spans.iter().zip(solved).enumerate() {
        let prev_end = if w == 0 { start } else { spans[w - 1].1 };
        let shared = prev_end.saturating_sub(start).min(overlap);
        for k in start..end {
            let local = (k - start + VIRTUAL_BLOCKS) * POSE_DIM;
            let global = (k + VIRTUAL_BLOCKS) * POSE_DIM;
            let alpha = if k - start < shared && w > 0 {
                (k - start + 1) as f64 / (shared + 1) as f64
            } else {
                1.0
            };
            for j in 0..POSE_DIM {
                z[global + j] = (1.0 - alpha) * z[global + j] + alpha * zw[local + j];
            }
        }
    }
    z
}
