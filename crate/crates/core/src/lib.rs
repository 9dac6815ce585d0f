//! Articulated 3D trajectory reconstruction from multi-camera 2D keypoints.
//!
//! Three estimators share one skeleton and camera model:
//!
//! - [`triangulate`]: per-frame robust triangulation of individual markers,
//! - [`ekf`]: an extended Kalman filter over pose, velocity and acceleration,
//! - [`fte`]: full trajectory estimation, a bound-constrained batch solve
//!   over the whole run with a redescending measurement cost.
//!
//! [`synth`] generates ground-truth runs and corrupted detections,
//! [`metrics`] scores estimates and [`pipeline`] ties everything to files.

pub mod camera;
pub mod ekf;
pub mod error;
pub mod fte;
pub mod init;
pub mod metrics;
pub mod observation;
pub mod pipeline;
pub mod skeleton;
pub mod synth;
pub mod triangulate;

pub use camera::{load_rig, CameraModel, CameraRig, Projection};
pub use error::{Error, Result};
pub use observation::{
    FrameDiagnostics, FrameEstimate, Keypoint, Method, Observation, ObservationSet,
    SolverSummary, TrajectoryEstimate,
};
pub use skeleton::{GeneralizedPose, MarkerCloud, SkeletonModel, MARKER_COUNT, POSE_DIM};
