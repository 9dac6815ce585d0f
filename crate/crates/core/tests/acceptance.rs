//! Acceptance suite: one check per criterion, each printing a PASS/FAIL line
//! with its runtime. Run with `cargo test -p kinetrack-core --test acceptance -- --nocapture`.

mod common;

use std::time::{Duration, Instant};

use common::{errors_from, gallop, max, mean};
use kinetrack::ekf::{ekf_predict, ekf_update, EkfConfig, EkfState};
use kinetrack::fte::{robust_cost, robust_cost_derivative, FteConfig, FteProblem, RobustCostParams};
use kinetrack::metrics::ScoreReport;
use kinetrack::pipeline::{run_pipeline, PipelineConfig};
use kinetrack::synth::{corrupt, CorruptionParams};
use kinetrack::{GeneralizedPose, Method, SkeletonModel, MARKER_COUNT, POSE_DIM};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Relative error of `a` against `b`, normalized by the larger ∞-norm.
fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn random_pose(model: &SkeletonModel, center: &GeneralizedPose, rng: &mut ChaCha8Rng) -> GeneralizedPose {
    let mut q = GeneralizedPose::zeros();
    for (j, b) in model.bounds.iter().enumerate() {
        q[j] = if b.is_free() {
            center[j] + rng.random_range(-0.2..0.2)
        } else {
            rng.random_range(b.min..b.max)
        };
    }
    q
}

// Marker parents and zero-pose offsets, transcribed from the kinematic table.
// `None` hangs off the head position.
const CHAIN: [(&str, Option<&str>, [f64; 3]); MARKER_COUNT] = [
    ("l_eye", None, [0.0, 0.03, 0.0]),
    ("r_eye", None, [0.0, -0.03, 0.0]),
    ("nose", None, [0.055, 0.0, -0.055]),
    ("neck_base", None, [-0.28, 0.0, 0.0]),
    ("spine", Some("neck_base"), [-0.37, 0.0, 0.0]),
    ("tail_base", Some("spine"), [-0.37, 0.0, 0.0]),
    ("tail_mid", Some("tail_base"), [-0.28, 0.0, 0.0]),
    ("tail_tip", Some("tail_mid"), [-0.36, 0.0, 0.0]),
    ("l_shoulder", Some("neck_base"), [-0.04, 0.08, -0.10]),
    ("l_front_knee", Some("l_shoulder"), [0.0, 0.0, -0.24]),
    ("l_front_ankle", Some("l_front_knee"), [0.0, 0.0, -0.28]),
    ("r_shoulder", Some("neck_base"), [-0.04, -0.08, -0.10]),
    ("r_front_knee", Some("r_shoulder"), [0.0, 0.0, -0.24]),
    ("r_front_ankle", Some("r_front_knee"), [0.0, 0.0, -0.28]),
    ("l_hip", Some("tail_base"), [0.12, 0.08, -0.06]),
    ("l_back_knee", Some("l_hip"), [0.0, 0.0, -0.32]),
    ("l_back_ankle", Some("l_back_knee"), [0.0, 0.0, -0.25]),
    ("r_hip", Some("tail_base"), [0.12, -0.08, -0.06]),
    ("r_back_knee", Some("r_hip"), [0.0, 0.0, -0.32]),
    ("r_back_ankle", Some("r_back_knee"), [0.0, 0.0, -0.25]),
];

fn chain_sum(name: &str) -> Vector3<f64> {
    let (_, parent, off) = CHAIN.iter().find(|(n, _, _)| *n == name).unwrap();
    Vector3::from(*off) + parent.map_or(Vector3::zeros(), chain_sum)
}

fn fk_goldens() -> Outcome {
    let model = SkeletonModel::cheetah();
    let mut worst = 0.0f64;
    for shift in [Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0)] {
        let mut q = GeneralizedPose::zeros();
        for (axis, &i) in model.translation.iter().enumerate() {
            q[i] = shift[axis];
        }
        let cloud = model.forward_kinematics(&q);
        for (name, _, _) in CHAIN {
            let i = model.marker_index(name).unwrap();
            worst = worst.max((cloud.0[i] - chain_sum(name) - shift).amax());
        }
    }
    let tip = chain_sum("tail_tip");
    let pinned = (tip - Vector3::new(-1.66, 0.0, 0.0)).amax() < 1e-12;
    outcome(
        worst < 1e-12 && pinned,
        format!("max deviation {worst:.1e} m over 40 markers; tail_tip oracle {tip:?}"),
    )
}

fn jacobians() -> Outcome {
    const INPUTS: usize = 1000;
    let s = gallop(4);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-6;

    let mut fk_worst = 0.0f64;
    for _ in 0..INPUTS {
        let q = random_pose(&s.model, &s.run.poses[0], &mut rng);
        let jac = s.model.fk_jacobian(&q);
        let mut fd = Vec::with_capacity(3 * MARKER_COUNT * POSE_DIM);
        let mut an = Vec::with_capacity(fd.capacity());
        for p in 0..POSE_DIM {
            let (mut lo, mut hi) = (q, q);
            lo[p] -= h;
            hi[p] += h;
            let (a, b) = (s.model.forward_kinematics(&lo), s.model.forward_kinematics(&hi));
            for m in 0..MARKER_COUNT {
                for r in 0..3 {
                    fd.push((b.0[m][r] - a.0[m][r]) / (2.0 * h));
                    an.push(jac[(3 * m + r, p)]);
                }
            }
        }
        fk_worst = fk_worst.max(rel_error(&an, &fd));
    }

    let mut proj_worst = 0.0f64;
    let mut proj_checked = 0;
    while proj_checked < INPUTS {
        let k = rng.random_range(0..s.run.markers.len());
        let m = rng.random_range(0..MARKER_COUNT);
        let p = s.run.markers[k].0[m] + Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
        let cam = &s.rig.cameras[rng.random_range(0..s.rig.cameras.len())];
        let Some(jac) = cam.project_jacobian(&p) else { continue };
        let mut fd = Vec::new();
        let mut an = Vec::new();
        for c in 0..3 {
            let (mut lo, mut hi) = (p, p);
            lo[c] -= h;
            hi[c] += h;
            let (a, b) = (cam.project(&lo).pixel(), cam.project(&hi).pixel());
            let (Some(a), Some(b)) = (a, b) else { continue };
            for r in 0..2 {
                fd.push((b[r] - a[r]) / (2.0 * h));
                an.push(jac[(r, c)]);
            }
        }
        if fd.len() == 6 {
            proj_worst = proj_worst.max(rel_error(&an, &fd));
            proj_checked += 1;
        }
    }

    // Noise and outliers so the measurement cost visits every branch.
    let obs = corrupt(&s.run.clean_obs, &CorruptionParams::new(5.0, 0.1, 100.0, 3));
    let cfg = FteConfig::default();
    let problem = FteProblem::new(&obs.frames, obs.n_markers, &s.rig, &s.model, &cfg);
    let mut grad_worst = 0.0f64;
    for _ in 0..INPUTS {
        let poses: Vec<GeneralizedPose> = s
            .run
            .poses
            .iter()
            .map(|q| random_pose(&s.model, q, &mut rng))
            .collect();
        let mut z = problem.pack(&poses);
        let n = z.len();
        for v in z[..2 * POSE_DIM].iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let (_, grad) = problem.objective_and_gradient(&z);
        let fd: Vec<f64> = (0..n)
            .map(|i| {
                let x = z[i];
                z[i] = x + h;
                let b = problem.objective(&z);
                z[i] = x - h;
                let a = problem.objective(&z);
                z[i] = x;
                (b - a) / (2.0 * h)
            })
            .collect();
        grad_worst = grad_worst.max(rel_error(&grad, &fd));
    }

    let worst = fk_worst.max(proj_worst).max(grad_worst);
    outcome(
        worst < 1e-4,
        format!(
            "max rel. error over {INPUTS} inputs each: fk {fk_worst:.1e}, projection {proj_worst:.1e}, objective gradient {grad_worst:.1e}"
        ),
    )
}

fn noiseless_recovery() -> Outcome {
    let s = gallop(100);
    let obs = &s.run.clean_obs;
    let tri = s.triangulate(obs);
    let tri_missing = tri.frames.iter().flat_map(|f| &f.markers).filter(|m| m.is_none()).count();
    let tri_max = max(&errors_from(&tri, &s.run.markers, 0));

    let ekf = s.ekf_from(obs, &s.run.poses[0]);
    let ekf_mean = mean(&errors_from(&ekf, &s.run.markers, 10));

    let fte = s.fte(obs, &tri);
    let fte_max = max(&errors_from(&fte.estimate, &s.run.markers, 0));

    outcome(
        tri_missing == 0 && tri_max < 1e-6 && ekf_mean < 5e-3 && fte_max < 1e-3,
        format!(
            "TRI max {tri_max:.1e} m ({tri_missing} missing), EKF post-burn-in mean {:.2} mm, FTE max {:.2} mm",
            ekf_mean * 1e3,
            fte_max * 1e3
        ),
    )
}

fn grid_config(dir: &std::path::Path, out: &str) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml("", dir).unwrap();
    cfg.out_dir = out.into();
    cfg
}

fn ordering(dir: &std::path::Path) -> Outcome {
    let cfg = grid_config(dir, "a");
    let out = run_pipeline(&cfg).unwrap();
    let report = out.report.unwrap();
    let mut pass = true;
    let mut notes = Vec::new();
    for ds in cfg.synth.datasets(cfg.seed) {
        let p_o = ds.corruption.p_o;
        if p_o < 0.02 {
            continue;
        }
        let med = |m: Method| report.entry(&ds.name, m).unwrap().error_3d.as_ref().unwrap().overall.median;
        let (t, e, f) = (med(Method::Triangulation), med(Method::Ekf), med(Method::Fte));
        let ordered = f <= e && e < t;
        let ratio_ok = p_o != 0.05 || t >= 2.0 * f;
        if !(ordered && ratio_ok) {
            pass = false;
        }
        notes.push(format!(
            "{}: TRI {:.1} EKF {:.1} FTE {:.1} mm{}",
            ds.name,
            t * 1e3,
            e * 1e3,
            f * 1e3,
            if ordered && ratio_ok { "" } else { " (violated)" }
        ));
    }
    outcome(pass, notes.join("; "))
}

fn gating() -> Outcome {
    let s = gallop(12);
    let cfg = EkfConfig::with_dt(s.rig.dt());
    let obs = &s.run.clean_obs;
    let mut state = EkfState::initial(&s.run.poses[0], &cfg);
    for f in &obs.frames[..10] {
        state = ekf_update(&state, f, obs.n_markers, &s.rig, &s.model, &cfg).0;
        state = ekf_predict(&state, &cfg, &s.model);
    }
    let clean = &obs.frames[10];
    let mut hit = clean.clone();
    let slot = hit.points.iter().position(Option::is_some).unwrap();
    hit.points[slot].as_mut().unwrap().u += 300.0;
    let (a, _) = ekf_update(&state, clean, obs.n_markers, &s.rig, &s.model, &cfg);
    let (b, diag) = ekf_update(&state, &hit, obs.n_markers, &s.rig, &s.model, &cfg);
    let ca = s.model.forward_kinematics(&a.pose());
    let cb = s.model.forward_kinematics(&b.pose());
    let shift = ca.0.iter().zip(&cb.0).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
    outcome(
        shift < 1e-3 && diag.gated >= 1,
        format!("max marker shift {:.3} mm, {} channel(s) gated", shift * 1e3, diag.gated),
    )
}

fn robust_cost_analytics() -> Outcome {
    let p = RobustCostParams::default();
    let (a, b, c) = (p.a, p.b, p.c);
    let mut jump = 0.0f64;
    for knot in [a, b, c] {
        for sign in [1.0, -1.0] {
            let x = sign * knot;
            let (lo, hi) = (x.next_down(), x.next_up());
            jump = jump.max((robust_cost(hi, &p) - robust_cost(lo, &p)).abs());
            jump = jump.max((robust_cost_derivative(hi, &p) - robust_cost_derivative(lo, &p)).abs());
        }
    }
    let grid_max = (0..=400_000)
        .map(|i| -40.0 + i as f64 * 2e-4)
        .map(|e| robust_cost_derivative(e, &p).abs())
        .fold(0.0, f64::max);
    let expected = a * b - a * a / 2.0 + a * (c - b).powi(2) / 2.0;
    let sat = robust_cost(c + 5.0, &p);
    outcome(
        jump < 1e-12 && grid_max <= a && (sat - expected).abs() < 1e-12,
        format!("max jump at knots {jump:.1e}, max |C'| {grid_max}, saturation {sat} vs closed form {expected}"),
    )
}

fn fte_feasibility() -> (Outcome, Duration) {
    let s = gallop(100);
    let obs = corrupt(&s.run.clean_obs, &CorruptionParams::new(5.0, 0.05, 100.0, 1));
    let tri = s.triangulate(&obs);
    let start = Instant::now();
    let res = s.fte(&obs, &tri);
    let took = start.elapsed();
    let v = &res.variables;
    let dt = s.rig.dt();
    let mut dyn_res = 0.0f64;
    for k in 1..v.x.len() {
        for j in 0..POSE_DIM {
            dyn_res = dyn_res
                .max((v.x[k][j] - v.x[k - 1][j] - dt * v.xdot[k][j]).abs())
                .max((v.xdot[k][j] - v.xdot[k - 1][j] - dt * v.xddot[k][j]).abs())
                .max((v.xddot[k][j] - v.xddot[k - 1][j] - v.w[k][j]).abs());
        }
    }
    let fk_res = v
        .x
        .iter()
        .zip(&v.s)
        .flat_map(|(q, s_k)| {
            let cloud = s.model.forward_kinematics(q);
            cloud.0.into_iter().zip(s_k.0.clone()).map(|(p, q)| (p - q).amax())
        })
        .fold(0.0, f64::max);
    let feasible = v.x.iter().all(|q| s.model.is_feasible(q));
    let pass = dyn_res < 1e-8 && fk_res < 1e-8 && feasible && took < Duration::from_secs(60);
    (
        outcome(
            pass,
            format!(
                "dynamics residual {dyn_res:.1e}, kinematics residual {fk_res:.1e}, within bounds {feasible}, solve {:.1} s (N = 100)",
                took.as_secs_f64()
            ),
        ),
        took,
    )
}

fn determinism(dir: &std::path::Path) -> Outcome {
    let cfg = grid_config(dir, "b");
    let report = run_pipeline(&cfg).unwrap().report.unwrap();
    let first = std::fs::read(dir.join("a/score.json")).unwrap();
    let second = std::fs::read(dir.join("b/score.json")).unwrap();
    let parsed = ScoreReport::from_json(std::str::from_utf8(&first).unwrap()).unwrap();
    outcome(
        first == second && parsed == report,
        format!("score.json {} bytes, identical: {}", first.len(), first == second),
    )
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let timed = |f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        (o, start.elapsed())
    };
    let secs = Duration::from_secs;
    let mut results: Vec<(u32, &str, Outcome, Duration, Duration)> = Vec::new();

    let (o, t) = timed(&fk_goldens);
    results.push((1, "FK golden values", o, t, secs(1)));
    let (o, t) = timed(&jacobians);
    results.push((2, "Jacobian suite", o, t, secs(30)));
    let (o, t) = timed(&noiseless_recovery);
    results.push((3, "noiseless recovery", o, t, secs(60)));
    let (o, t) = timed(&|| ordering(dir.path()));
    results.push((4, "ordering on the corruption grid", o, t, secs(600)));
    let (o, t) = timed(&gating);
    results.push((5, "EKF gating", o, t, secs(5)));
    let (o, t) = timed(&robust_cost_analytics);
    results.push((6, "robust-cost analytics", o, t, Duration::MAX));
    // Timed inside: the limit covers the solve alone.
    let (o, t) = fte_feasibility();
    results.push((7, "FTE feasibility", o, t, secs(60)));
    let (o, t) = timed(&|| determinism(dir.path()));
    results.push((8, "determinism", o, t, secs(600)));

    println!();
    let mut failed = Vec::new();
    for (n, name, o, took, limit) in &results {
        let pass = o.pass && took <= limit;
        if !pass {
            failed.push(*n);
        }
        println!(
            "criterion {n} {:<32} {} ({:.2} s) {}",
            name,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            o.detail
        );
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
