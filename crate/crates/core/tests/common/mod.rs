#![allow(dead_code)]

use kinetrack::ekf::{run_ekf, EkfConfig, EkfState};
use kinetrack::fte::{initial_poses, solve_fte, FteConfig, FteResult};
use kinetrack::init::root_poses_for_run;
use kinetrack::synth::{generate_run, GaitProfile, SimRun};
use kinetrack::triangulate::{to_estimate, triangulate_trajectory, TriangulationConfig};
use kinetrack::{CameraRig, GeneralizedPose, MarkerCloud, ObservationSet, SkeletonModel, TrajectoryEstimate};

pub struct Scenario {
    pub model: SkeletonModel,
    pub rig: CameraRig,
    pub run: SimRun,
}

pub fn gallop(frames: usize) -> Scenario {
    let model = SkeletonModel::cheetah();
    let rig = CameraRig::synthetic();
    let run = generate_run(&model, &rig, frames, &GaitProfile::gallop()).unwrap();
    Scenario { model, rig, run }
}

impl Scenario {
    pub fn triangulate(&self, obs: &ObservationSet) -> TrajectoryEstimate {
        to_estimate(&triangulate_trajectory(obs, &self.rig, &TriangulationConfig::default()))
    }

    /// Root poses recovered from a triangulation, as the pipeline seeds its estimators.
    pub fn roots(&self, tri: &TrajectoryEstimate) -> Vec<GeneralizedPose> {
        let pts: Vec<_> = tri.frames.iter().map(|f| f.markers.clone()).collect();
        root_poses_for_run(&self.model, &pts)
    }

    pub fn ekf_from(&self, obs: &ObservationSet, first: &GeneralizedPose) -> TrajectoryEstimate {
        let cfg = EkfConfig::with_dt(self.rig.dt());
        run_ekf(obs, &self.rig, &self.model, &cfg, EkfState::initial(first, &cfg))
    }

    pub fn ekf(&self, obs: &ObservationSet, tri: &TrajectoryEstimate) -> TrajectoryEstimate {
        let roots = self.roots(tri);
        self.ekf_from(obs, &initial_poses(&self.model, &roots[..1])[0])
    }

    pub fn fte(&self, obs: &ObservationSet, tri: &TrajectoryEstimate) -> FteResult {
        let init = initial_poses(&self.model, &self.roots(tri));
        solve_fte(obs, &self.rig, &self.model, &FteConfig::default(), &init).unwrap()
    }
}

/// 3D marker errors (m) of frames `from..`, skipping unreconstructed markers.
pub fn errors_from(est: &TrajectoryEstimate, truth: &[MarkerCloud], from: usize) -> Vec<f64> {
    est.frames
        .iter()
        .zip(truth)
        .skip(from)
        .flat_map(|(f, t)| {
            f.markers
                .iter()
                .zip(&t.0)
                .filter_map(|(m, g)| m.map(|m| (m - g).norm()))
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

pub fn median(v: &[f64]) -> f64 {
    kinetrack::metrics::median(v)
}
