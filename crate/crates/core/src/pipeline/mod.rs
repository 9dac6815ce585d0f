//! Files, configuration and stage orchestration.

mod config;
mod io;
mod keypoints;
mod run;
mod scene;

pub use config::{ExportConfig, Inputs, PipelineConfig, Stage, SynthConfig};
pub use io::write_atomic;
pub use keypoints::{ColumnMapping, KeypointFile, KeypointHeader, KeypointRow, KEYPOINT_SCHEMA};
pub use run::{
    run_pipeline, trajectory_file_name, DatasetState, Manifest, RunOutcome, StageRecord, StageStatus,
    TrajectoryFile, GROUND_TRUTH_FILE, INPUT_DATASET, MANIFEST_FILE, MANIFEST_SCHEMA, SCENE_FILE,
    SCORE_CSV_FILE, SCORE_JSON_FILE, TRAJECTORY_SCHEMA,
};
pub use scene::{
    apply_corrections, build_scene, export_scene, CorrectionFile, CorrectionRecord, CorrectionSummary,
    MarkerAdjustments, Rejection, SceneDocument, SceneFrame, SceneLink, SceneResidual, SceneSkeleton,
    CORRECTION_SCHEMA, LARGE_ADJUSTMENT, ROOT, SCENE_SCHEMA,
};
