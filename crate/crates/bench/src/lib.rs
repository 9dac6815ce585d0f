//! Shared fixtures for the benchmarks in `benches/`.

use kinetrack::ekf::EkfConfig;
use kinetrack::synth::{corrupt, generate_run, CorruptionParams, GaitProfile, SimRun};
use kinetrack::{CameraRig, ObservationSet, SkeletonModel};

pub struct Fixture {
    pub model: SkeletonModel,
    pub rig: CameraRig,
    pub run: SimRun,
    /// Detections with 5 px noise and 2% outliers.
    pub noisy: ObservationSet,
    pub ekf: EkfConfig,
}

impl Fixture {
    pub fn gallop(frames: usize) -> Self {
        let model = SkeletonModel::cheetah();
        let rig = CameraRig::synthetic();
        let run = generate_run(&model, &rig, frames, &GaitProfile::gallop()).expect("valid gait");
        let params = CorruptionParams::new(5.0, 0.02, 100.0, 7);
        let noisy = corrupt(&run.clean_obs, &params);
        let ekf = EkfConfig::with_dt(rig.dt());
        Fixture {
            model,
            rig,
            run,
            noisy,
            ekf,
        }
    }
}
