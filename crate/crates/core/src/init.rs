//! Root pose estimates from triangulated markers, used to seed EKF and FTE.

use nalgebra::Vector3;

use crate::skeleton::{Axis, GeneralizedPose, SkeletonModel};

/// Head position, heading, pitch and roll from triangulated eyes and neck base.
///
/// The head sits midway between the eyes; its forward axis points from the
/// neck base to the head and its lateral axis from the right eye to the left.
/// Every other angle is zero. Returns `None` when either eye is missing.
pub fn root_pose_from_points(
    model: &SkeletonModel,
    points: &[Option<Vector3<f64>>],
) -> Option<GeneralizedPose> {
    let find = |name: &str| model.marker_index(name).and_then(|i| points.get(i).copied().flatten());
    let l_eye = find("l_eye")?;
    let r_eye = find("r_eye")?;
    let head = 0.5 * (l_eye + r_eye);
    let lateral = l_eye - r_eye;
    let forward = match find("neck_base") {
        Some(neck) if (head - neck).norm() > 1e-6 => head - neck,
        _ => lateral.cross(&Vector3::z()) * -1.0,
    };

    let yaw = forward.y.atan2(forward.x);
    let pitch = -forward.z.atan2(forward.xy().norm());
    let yaw_pitch = Axis::Z.rotation(yaw) * Axis::Y.rotation(pitch);
    let local = yaw_pitch.transpose() * lateral;
    let roll = local.z.atan2(local.y);

    let root = &model.joints[0];
    let mut pose = GeneralizedPose::zeros();
    for (axis, slot) in root.sequence.iter().zip(root.slots) {
        if let Some(p) = slot {
            pose[p] = match axis {
                Axis::X => roll,
                Axis::Y => pitch,
                Axis::Z => yaw,
            };
        }
    }
    for (t, value) in model.translation.iter().zip(head.iter()) {
        pose[*t] = *value;
    }
    Some(model.clamp(&pose))
}

/// Root poses for every frame; frames without both eyes reuse the nearest
/// earlier estimate (or the first available one at the start).
pub fn root_poses_for_run(
    model: &SkeletonModel,
    frames: &[Vec<Option<Vector3<f64>>>],
) -> Vec<GeneralizedPose> {
    let raw: Vec<Option<GeneralizedPose>> = frames
        .iter()
        .map(|pts| root_pose_from_points(model, pts))
        .collect();
    let first = raw.iter().flatten().next().copied().unwrap_or_default();
    let mut last = first;
    raw.into_iter()
        .map(|p| {
            if let Some(p) = p {
                last = p;
            }
            last
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_root_of_posed_model() {
        let model = SkeletonModel::cheetah();
        let mut q = GeneralizedPose::zeros();
        q[0] = 1.5;
        q[1] = -0.4;
        q[2] = 0.7;
        q[3] = 0.1; // roll
        q[4] = -0.2; // pitch
        q[5] = 2.0; // yaw
        let cloud = model.forward_kinematics(&q);
        let pts: Vec<_> = cloud.0.iter().copied().map(Some).collect();
        let est = root_pose_from_points(&model, &pts).unwrap();
        for i in 0..6 {
            assert!((est[i] - q[i]).abs() < 1e-12, "param {i}: {} vs {}", est[i], q[i]);
        }
    }
}
