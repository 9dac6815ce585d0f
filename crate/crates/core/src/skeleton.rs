//! Articulated rigid-body model and forward kinematics.
//!
//! The model is a tree of rotation nodes rooted at the head. Each node owns
//! up to three joint angles which compose, in the node's declared sequence,
//! into a local rotation relative to its parent. Markers hang off the tree:
//! a marker's position is the position of its origin (the root point or an
//! earlier marker) plus the owning node's world rotation applied to a fixed
//! offset.
//!
//! Link lengths, rotation sequences and bounds are model data. The default
//! cheetah model ships as `data/cheetah.json` and is available through
//! [`SkeletonModel::cheetah`].

use std::path::Path;

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of generalized coordinates: root translation plus 21 joint angles.
pub const POSE_DIM: usize = 24;
/// Number of tracked markers.
pub const MARKER_COUNT: usize = 20;

/// Canonical marker order used by every file format and stacked vector.
pub const CANONICAL_MARKERS: [&str; MARKER_COUNT] = [
    "l_eye",
    "r_eye",
    "nose",
    "neck_base",
    "spine",
    "tail_base",
    "tail_mid",
    "tail_tip",
    "l_shoulder",
    "l_front_knee",
    "l_front_ankle",
    "r_shoulder",
    "r_front_knee",
    "r_front_ankle",
    "l_hip",
    "l_back_knee",
    "l_back_ankle",
    "r_hip",
    "r_back_knee",
    "r_back_ankle",
];

const DEFAULT_MODEL: &str = include_str!("../data/cheetah.json");

/// Jacobian of the flattened marker cloud (marker-major, xyz) w.r.t. the pose.
pub type FkJacobian = SMatrix<f64, { 3 * MARKER_COUNT }, POSE_DIM>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn unit(self) -> Vector3<f64> {
        match self {
            Axis::X => Vector3::x(),
            Axis::Y => Vector3::y(),
            Axis::Z => Vector3::z(),
        }
    }

    /// Active rotation by `angle` about this axis.
    pub fn rotation(self, angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        match self {
            Axis::X => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
            Axis::Y => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
            Axis::Z => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        }
    }
}

/// Composes elementary rotations in sequence order: `E(seq[0]) * E(seq[1]) * E(seq[2])`.
///
/// `angles[i]` is the angle for `sequence[i]`.
pub fn rotation_from_angles(sequence: [Axis; 3], angles: [f64; 3]) -> Matrix3<f64> {
    sequence
        .iter()
        .zip(angles)
        .fold(Matrix3::identity(), |acc, (axis, angle)| {
            acc * axis.rotation(angle)
        })
}

/// Closed interval for one pose parameter. Unbounded sides are infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub min: f64,
    pub max: f64,
}

impl Bound {
    pub const FREE: Bound = Bound {
        min: f64::NEG_INFINITY,
        max: f64::INFINITY,
    };

    pub fn contains(&self, value: f64) -> bool {
        value >= self.min && value <= self.max
    }

    pub fn clamp(&self, value: f64) -> f64 {
        value.max(self.min).min(self.max)
    }

    pub fn is_free(&self) -> bool {
        self.min == f64::NEG_INFINITY && self.max == f64::INFINITY
    }
}

/// A rotation node of the kinematic tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub sequence: [Axis; 3],
    /// Pose-parameter index driving each sequence slot; `None` keeps the slot at zero.
    pub slots: [Option<usize>; 3],
}

impl Joint {
    fn slot_angles(&self, pose: &GeneralizedPose) -> [f64; 3] {
        self.slots.map(|slot| slot.map_or(0.0, |p| pose.0[p]))
    }

    pub fn local_rotation(&self, pose: &GeneralizedPose) -> Matrix3<f64> {
        rotation_from_angles(self.sequence, self.slot_angles(pose))
    }

    pub fn dof(&self) -> usize {
        self.slots.iter().flatten().count()
    }
}

/// Fixed offset from an origin point, expressed in a node's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub node: usize,
    /// Marker index of the origin, or `None` for the root (head) point.
    pub origin: Option<usize>,
    pub offset: Vector3<f64>,
}

/// The 24 generalized coordinates of one frame: `[x, y, z, φ₁, θ₁, ψ₁, …, θ₁₄]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GeneralizedPose(pub [f64; POSE_DIM]);

impl Default for GeneralizedPose {
    fn default() -> Self {
        GeneralizedPose([0.0; POSE_DIM])
    }
}

impl GeneralizedPose {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn from_slice(values: &[f64]) -> Self {
        let mut q = [0.0; POSE_DIM];
        q.copy_from_slice(&values[..POSE_DIM]);
        GeneralizedPose(q)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for GeneralizedPose {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for GeneralizedPose {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Marker positions in the inertial frame, canonical order, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MarkerCloud(pub Vec<Vector3<f64>>);

impl MarkerCloud {
    pub fn get(&self, marker: usize) -> &Vector3<f64> {
        &self.0[marker]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// World rotations of every node plus world axes of every angle parameter.
#[derive(Debug, Clone)]
pub struct Kinematics {
    pub rotations: Vec<Matrix3<f64>>,
    pub axes: [Option<Vector3<f64>>; POSE_DIM],
}

/// The articulated skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonModel {
    pub parameter_names: Vec<String>,
    pub bounds: Vec<Bound>,
    /// Pose indices holding the root translation (x, y, z).
    pub translation: [usize; 3],
    pub joints: Vec<Joint>,
    pub markers: Vec<String>,
    /// One link per marker, same order as `markers`.
    pub links: Vec<Link>,
    /// Per marker, the chain of link indices from the root to the marker.
    chains: Vec<Vec<usize>>,
    /// Per joint, the angle parameters of that joint and all its ancestors.
    lineage: Vec<Vec<usize>>,
}

// ---- model file -----------------------------------------------------------

pub const SKELETON_SCHEMA: &str = "kinetrack.skeleton/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    root_translation: [String; 3],
    parameters: Vec<ParameterEntry>,
    nodes: Vec<NodeEntry>,
    markers: Vec<MarkerEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParameterEntry {
    name: String,
    min: Option<f64>,
    max: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    name: String,
    parent: Option<String>,
    sequence: [Axis; 3],
    angles: AxisParams,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z: Option<String>,
}

impl AxisParams {
    fn get(&self, axis: Axis) -> Option<&String> {
        match axis {
            Axis::X => self.x.as_ref(),
            Axis::Y => self.y.as_ref(),
            Axis::Z => self.z.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarkerEntry {
    name: String,
    origin: Option<String>,
    node: String,
    offset: [f64; 3],
}

impl SkeletonModel {
    /// The default cheetah model.
    pub fn cheetah() -> Self {
        Self::from_json(DEFAULT_MODEL).expect("bundled skeleton model is valid")
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::parse("skeleton model", e))?;
        Self::from_file(file)
    }

    fn from_file(file: ModelFile) -> Result<Self> {
        if file.schema != SKELETON_SCHEMA {
            return Err(Error::invalid(format!(
                "skeleton schema `{}` is not `{SKELETON_SCHEMA}`",
                file.schema
            )));
        }
        if file.parameters.len() != POSE_DIM {
            return Err(Error::invalid(format!(
                "skeleton declares {} pose parameters, expected {POSE_DIM}",
                file.parameters.len()
            )));
        }
        let parameter_names: Vec<String> =
            file.parameters.iter().map(|p| p.name.clone()).collect();
        let param_index = |name: &str| -> Result<usize> {
            parameter_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::invalid(format!("unknown pose parameter `{name}`")))
        };

        let mut bounds = Vec::with_capacity(POSE_DIM);
        for p in &file.parameters {
            let b = Bound {
                min: p.min.unwrap_or(f64::NEG_INFINITY),
                max: p.max.unwrap_or(f64::INFINITY),
            };
            if b.min.is_nan() || b.max.is_nan() || !(b.min < b.max) {
                return Err(Error::invalid(format!(
                    "parameter `{}` has invalid bounds [{}, {}]",
                    p.name, b.min, b.max
                )));
            }
            bounds.push(b);
        }

        let mut translation = [0usize; 3];
        for (slot, name) in translation.iter_mut().zip(&file.root_translation) {
            *slot = param_index(name)?;
        }

        let mut joints: Vec<Joint> = Vec::with_capacity(file.nodes.len());
        let mut owner: Vec<Option<usize>> = vec![None; POSE_DIM];
        for t in translation {
            owner[t] = Some(usize::MAX);
        }
        for (ji, node) in file.nodes.iter().enumerate() {
            let parent = match &node.parent {
                None => None,
                Some(pname) => Some(
                    joints
                        .iter()
                        .position(|j| &j.name == pname)
                        .ok_or_else(|| {
                            Error::invalid(format!(
                                "node `{}` names parent `{pname}` which is not declared before it",
                                node.name
                            ))
                        })?,
                ),
            };
            if parent.is_none() && ji != 0 {
                return Err(Error::invalid(format!(
                    "node `{}` has no parent; only the first node may be the root",
                    node.name
                )));
            }
            if ji == 0 && parent.is_some() {
                return Err(Error::invalid("the first node must be the root"));
            }
            let seq = node.sequence;
            if seq[0] == seq[1] || seq[1] == seq[2] || seq[0] == seq[2] {
                return Err(Error::invalid(format!(
                    "node `{}` repeats an axis in its rotation sequence",
                    node.name
                )));
            }
            let mut slots = [None; 3];
            for (s, axis) in seq.iter().enumerate() {
                if let Some(name) = node.angles.get(*axis) {
                    let p = param_index(name)?;
                    if owner[p].is_some() {
                        return Err(Error::invalid(format!(
                            "pose parameter `{name}` is driven twice"
                        )));
                    }
                    owner[p] = Some(ji);
                    slots[s] = Some(p);
                }
            }
            joints.push(Joint {
                name: node.name.clone(),
                parent,
                sequence: seq,
                slots,
            });
        }
        if let Some(p) = owner.iter().position(|o| o.is_none()) {
            return Err(Error::invalid(format!(
                "pose parameter `{}` drives nothing",
                parameter_names[p]
            )));
        }

        if file.markers.len() != MARKER_COUNT {
            return Err(Error::invalid(format!(
                "skeleton declares {} markers, expected {MARKER_COUNT}",
                file.markers.len()
            )));
        }
        let mut markers = Vec::with_capacity(MARKER_COUNT);
        let mut links = Vec::with_capacity(MARKER_COUNT);
        for (mi, m) in file.markers.iter().enumerate() {
            if m.name != CANONICAL_MARKERS[mi] {
                return Err(Error::invalid(format!(
                    "marker {mi} is `{}`, canonical order requires `{}`",
                    m.name, CANONICAL_MARKERS[mi]
                )));
            }
            let node = joints
                .iter()
                .position(|j| j.name == m.node)
                .ok_or_else(|| {
                    Error::invalid(format!("marker `{}` names unknown node `{}`", m.name, m.node))
                })?;
            let origin = match &m.origin {
                None => None,
                Some(o) => Some(markers.iter().position(|n: &String| n == o).ok_or_else(
                    || {
                        Error::invalid(format!(
                            "marker `{}` has origin `{o}` which is not an earlier marker",
                            m.name
                        ))
                    },
                )?),
            };
            if m.offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("marker `{}` offset is not finite", m.name)));
            }
            markers.push(m.name.clone());
            links.push(Link {
                node,
                origin,
                offset: Vector3::from(m.offset),
            });
        }

        Ok(Self::assemble(parameter_names, bounds, translation, joints, markers, links))
    }

    fn assemble(
        parameter_names: Vec<String>,
        bounds: Vec<Bound>,
        translation: [usize; 3],
        joints: Vec<Joint>,
        markers: Vec<String>,
        links: Vec<Link>,
    ) -> Self {
        let mut chains: Vec<Vec<usize>> = Vec::with_capacity(links.len());
        for (mi, link) in links.iter().enumerate() {
            let mut chain = match link.origin {
                Some(o) => chains[o].clone(),
                None => Vec::new(),
            };
            chain.push(mi);
            chains.push(chain);
        }
        let mut lineage: Vec<Vec<usize>> = Vec::with_capacity(joints.len());
        for joint in &joints {
            let mut params = match joint.parent {
                Some(p) => lineage[p].clone(),
                None => Vec::new(),
            };
            params.extend(joint.slots.iter().flatten());
            lineage.push(params);
        }
        SkeletonModel {
            parameter_names,
            bounds,
            translation,
            joints,
            markers,
            links,
            chains,
            lineage,
        }
    }

    /// Serializes the model in the skeleton file format.
    pub fn to_json(&self) -> String {
        let finite = |v: f64| if v.is_finite() { Some(v) } else { None };
        let file = ModelFile {
            schema: SKELETON_SCHEMA.to_string(),
            note: None,
            root_translation: self.translation.map(|i| self.parameter_names[i].clone()),
            parameters: self
                .parameter_names
                .iter()
                .zip(&self.bounds)
                .map(|(name, b)| ParameterEntry {
                    name: name.clone(),
                    min: finite(b.min),
                    max: finite(b.max),
                })
                .collect(),
            nodes: self
                .joints
                .iter()
                .map(|j| {
                    let mut angles = AxisParams::default();
                    for (axis, slot) in j.sequence.iter().zip(j.slots) {
                        let name = slot.map(|p| self.parameter_names[p].clone());
                        match axis {
                            Axis::X => angles.x = name,
                            Axis::Y => angles.y = name,
                            Axis::Z => angles.z = name,
                        }
                    }
                    NodeEntry {
                        name: j.name.clone(),
                        parent: j.parent.map(|p| self.joints[p].name.clone()),
                        sequence: j.sequence,
                        angles,
                    }
                })
                .collect(),
            markers: self
                .markers
                .iter()
                .zip(&self.links)
                .map(|(name, l)| MarkerEntry {
                    name: name.clone(),
                    origin: l.origin.map(|o| self.markers[o].clone()),
                    node: self.joints[l.node].name.clone(),
                    offset: [l.offset.x, l.offset.y, l.offset.z],
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        self.markers.iter().position(|m| m == name)
    }

    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.parameter_names.iter().position(|m| m == name)
    }

    /// Indices of the angle parameters (everything except the root translation).
    pub fn angle_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..POSE_DIM).filter(|i| !self.translation.contains(i))
    }

    pub fn is_feasible(&self, pose: &GeneralizedPose) -> bool {
        pose.is_finite() && self.bounds.iter().zip(pose.0).all(|(b, v)| b.contains(v))
    }

    pub fn clamp(&self, pose: &GeneralizedPose) -> GeneralizedPose {
        let mut out = *pose;
        for (v, b) in out.0.iter_mut().zip(&self.bounds) {
            *v = b.clamp(*v);
        }
        out
    }

    /// True when every three-axis node keeps its middle rotation strictly
    /// inside (-π/2, π/2) under the current bounds.
    pub fn avoids_gimbal_lock(&self) -> bool {
        let half_pi = std::f64::consts::FRAC_PI_2;
        self.joints
            .iter()
            .filter(|j| j.dof() == 3)
            .all(|j| match j.slots[1] {
                Some(p) => self.bounds[p].min > -half_pi && self.bounds[p].max < half_pi,
                None => true,
            })
    }

    /// Marker pairs connected by a rigid link (origin marker, marker).
    /// Markers hanging directly off the root point have no partner.
    pub fn marker_edges(&self) -> Vec<(usize, usize)> {
        self.links
            .iter()
            .enumerate()
            .filter_map(|(mi, l)| l.origin.map(|o| (o, mi)))
            .collect()
    }

    pub fn kinematics(&self, pose: &GeneralizedPose) -> Kinematics {
        let mut rotations: Vec<Matrix3<f64>> = Vec::with_capacity(self.joints.len());
        let mut axes = [None; POSE_DIM];
        for joint in &self.joints {
            let mut r = match joint.parent {
                Some(p) => rotations[p],
                None => Matrix3::identity(),
            };
            for (axis, slot) in joint.sequence.iter().zip(joint.slots) {
                if let Some(p) = slot {
                    axes[p] = Some(r * axis.unit());
                    r *= axis.rotation(pose.0[p]);
                }
            }
            rotations.push(r);
        }
        Kinematics { rotations, axes }
    }

    fn root(&self, pose: &GeneralizedPose) -> Vector3<f64> {
        Vector3::new(
            pose.0[self.translation[0]],
            pose.0[self.translation[1]],
            pose.0[self.translation[2]],
        )
    }

    pub fn forward_kinematics(&self, pose: &GeneralizedPose) -> MarkerCloud {
        let kin = self.kinematics(pose);
        self.markers_from(pose, &kin)
    }

    fn markers_from(&self, pose: &GeneralizedPose, kin: &Kinematics) -> MarkerCloud {
        let root = self.root(pose);
        let mut out: Vec<Vector3<f64>> = Vec::with_capacity(self.links.len());
        for link in &self.links {
            let base = match link.origin {
                Some(o) => out[o],
                None => root,
            };
            out.push(base + kin.rotations[link.node] * link.offset);
        }
        MarkerCloud(out)
    }

    /// Marker cloud and its Jacobian with respect to the pose.
    pub fn forward_kinematics_with_jacobian(
        &self,
        pose: &GeneralizedPose,
    ) -> (MarkerCloud, Box<FkJacobian>) {
        let kin = self.kinematics(pose);
        let cloud = self.markers_from(pose, &kin);
        let mut jac = Box::new(FkJacobian::zeros());
        let arms: Vec<Vector3<f64>> = self
            .links
            .iter()
            .map(|l| kin.rotations[l.node] * l.offset)
            .collect();
        for (mi, chain) in self.chains.iter().enumerate() {
            let row = 3 * mi;
            for (axis, &t) in self.translation.iter().enumerate() {
                jac[(row + axis, t)] = 1.0;
            }
            for &li in chain {
                let arm = arms[li];
                for &p in &self.lineage[self.links[li].node] {
                    let omega = kin.axes[p].expect("angle parameter has an axis");
                    let d = omega.cross(&arm);
                    jac[(row, p)] += d.x;
                    jac[(row + 1, p)] += d.y;
                    jac[(row + 2, p)] += d.z;
                }
            }
        }
        (cloud, jac)
    }

    pub fn fk_jacobian(&self, pose: &GeneralizedPose) -> Box<FkJacobian> {
        self.forward_kinematics_with_jacobian(pose).1
    }
}
