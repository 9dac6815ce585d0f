use std::collections::BTreeSet;

use kinetrack::skeleton::{rotation_from_angles, Axis};
use kinetrack::{CameraRig, GeneralizedPose, SkeletonModel, POSE_DIM};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

/// A feasible pose: unbounded parameters drawn from ±3 (m or rad).
fn feasible_pose() -> impl Strategy<Value = GeneralizedPose> {
    let model = SkeletonModel::cheetah();
    let ranges: Vec<_> = model
        .bounds
        .iter()
        .map(|b| {
            let lo = if b.min.is_finite() { b.min } else { -3.0 };
            let hi = if b.max.is_finite() { b.max } else { 3.0 };
            lo..=hi
        })
        .collect();
    ranges.prop_map(|v| GeneralizedPose::from_slice(&v))
}

/// Markers whose position depends on each joint, from the tree alone.
fn dependents(model: &SkeletonModel) -> Vec<BTreeSet<usize>> {
    let is_ancestor = |a: usize, mut n: usize| loop {
        if n == a {
            return true;
        }
        match model.joints[n].parent {
            Some(p) => n = p,
            None => return false,
        }
    };
    let mut out = vec![BTreeSet::new(); model.joints.len()];
    for m in 0..model.markers.len() {
        let mut nodes = Vec::new();
        let mut link = Some(m);
        while let Some(l) = link {
            nodes.push(model.links[l].node);
            link = model.links[l].origin;
        }
        for (j, set) in out.iter_mut().enumerate() {
            if nodes.iter().any(|&n| is_ancestor(j, n)) {
                set.insert(m);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rotations_are_orthonormal(a in -3.2f64..3.2, b in -1.5f64..1.5, c in -3.2f64..3.2) {
        let r = rotation_from_angles([Axis::Z, Axis::Y, Axis::X], [a, b, c]);
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        prop_assert!(err < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn link_lengths_do_not_depend_on_pose(pose in feasible_pose()) {
        let model = SkeletonModel::cheetah();
        let rest = model.forward_kinematics(&GeneralizedPose::zeros());
        let cloud = model.forward_kinematics(&pose);
        for (a, b) in model.marker_edges() {
            let d0 = (rest.0[a] - rest.0[b]).norm();
            let d = (cloud.0[a] - cloud.0[b]).norm();
            prop_assert!((d - d0).abs() < 1e-12, "edge {a}-{b}: {d} vs {d0}");
        }
    }

    #[test]
    fn translation_is_equivariant(pose in feasible_pose(), dx in -5.0f64..5.0, dy in -5.0f64..5.0, dz in -5.0f64..5.0) {
        let model = SkeletonModel::cheetah();
        let mut moved = pose;
        let [ix, iy, iz] = model.translation;
        moved[ix] += dx;
        moved[iy] += dy;
        moved[iz] += dz;
        let a = model.forward_kinematics(&pose);
        let b = model.forward_kinematics(&moved);
        for (p, q) in a.0.iter().zip(&b.0) {
            prop_assert!((q - p - Vector3::new(dx, dy, dz)).norm() < 1e-12);
        }
    }

    #[test]
    fn angles_move_only_their_subtree(pose in feasible_pose(), delta in 0.01f64..0.3) {
        let model = SkeletonModel::cheetah();
        let deps = dependents(&model);
        let base = model.forward_kinematics(&pose);
        for (j, joint) in model.joints.iter().enumerate() {
            for p in joint.slots.iter().flatten() {
                let mut q = pose;
                q[*p] += delta;
                let moved = model.forward_kinematics(&q);
                for m in 0..model.markers.len() {
                    if !deps[j].contains(&m) {
                        prop_assert!((moved.0[m] - base.0[m]).norm() < 1e-12,
                            "{} moved {}", model.parameter_names[*p], model.markers[m]);
                    }
                }
            }
        }
    }

    #[test]
    fn clamp_is_feasible_and_idempotent(raw in prop::collection::vec(-10.0f64..10.0, POSE_DIM)) {
        let model = SkeletonModel::cheetah();
        let q = model.clamp(&GeneralizedPose::from_slice(&raw));
        prop_assert!(model.is_feasible(&q));
        prop_assert_eq!(model.clamp(&q), q);
    }

    #[test]
    fn undistort_inverts_projection(x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.5f64..10.0) {
        let rig = CameraRig::synthetic();
        let cam = &rig.cameras[0];
        let pc = Vector3::new(x, y, z);
        if let Some(px) = cam.project_camera(&pc).pixel() {
            let ray = cam.undistort(&px);
            let cos = ray.normalize().dot(&pc.normalize());
            prop_assert!(cos > 1.0 - 1e-12);
        }
    }
}

#[test]
fn every_angle_has_a_dependent_marker() {
    let model = SkeletonModel::cheetah();
    let deps = dependents(&model);
    for (j, joint) in model.joints.iter().enumerate() {
        if joint.dof() > 0 {
            assert!(!deps[j].is_empty(), "joint {} drives nothing", joint.name);
        }
    }
}

#[test]
fn cheetah_bounds_avoid_gimbal_lock() {
    assert!(SkeletonModel::cheetah().avoids_gimbal_lock());
}
