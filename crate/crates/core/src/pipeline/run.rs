use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, Stage};
use super::io::{read_text, write_atomic};
use super::keypoints::{KeypointFile, KeypointHeader};
use super::scene::export_scene;
use crate::camera::{load_rig, CameraRig};
use crate::ekf::{run_ekf, EkfConfig, EkfState};
use crate::error::{Error, Result};
use crate::fte::{initial_poses, solve_fte};
use crate::init::root_poses_for_run;
use crate::metrics::{ScoreEntry, ScoreReport};
use crate::observation::{Method, ObservationSet, TrajectoryEstimate};
use crate::skeleton::{MarkerCloud, SkeletonModel};
use crate::synth::{corrupt, generate_run, GroundTruth};
use crate::triangulate::{to_estimate, triangulate_trajectory};

pub const MANIFEST_SCHEMA: &str = "kinetrack.manifest/1";
pub const TRAJECTORY_SCHEMA: &str = "kinetrack.trajectory/1";
/// Dataset name used when detections come from a keypoint file.
pub const INPUT_DATASET: &str = "input";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const SCORE_JSON_FILE: &str = "score.json";
pub const SCORE_CSV_FILE: &str = "score.csv";
pub const SCENE_FILE: &str = "scene.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryFile {
    pub schema: String,
    pub dataset: String,
    pub marker_names: Vec<String>,
    pub estimate: TrajectoryEstimate,
}

impl TrajectoryFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: TrajectoryFile =
            serde_json::from_str(text).map_err(|e| Error::parse("trajectory", e.to_string()))?;
        if f.schema != TRAJECTORY_SCHEMA {
            return Err(Error::invalid(format!(
                "trajectory: expected schema '{TRAJECTORY_SCHEMA}', found '{}'",
                f.schema
            )));
        }
        Ok(f)
    }
}

pub fn trajectory_file_name(method: Method) -> String {
    format!("trajectory.{}.json", method.tag().to_lowercase())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub complete: bool,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("manifest", e.to_string()))
    }
}

/// Inputs and intermediate results of one dataset.
#[derive(Debug, Clone)]
pub struct DatasetState {
    pub name: String,
    pub obs: ObservationSet,
    /// 2D reference for reprojection scores.
    pub labels: ObservationSet,
    pub truth: Option<Vec<MarkerCloud>>,
    pub estimates: Vec<TrajectoryEstimate>,
}

impl DatasetState {
    pub fn estimate(&self, method: Method) -> Option<&TrajectoryEstimate> {
        self.estimates.iter().find(|e| e.method == method)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub plan: Vec<Stage>,
    pub manifest: Manifest,
    pub datasets: Vec<DatasetState>,
    pub report: Option<ScoreReport>,
}

struct Context<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    rig: CameraRig,
    model: SkeletonModel,
    datasets: Vec<DatasetState>,
    report: Option<ScoreReport>,
}

impl Context<'_> {
    fn write(&self, rel: &str, contents: &str) -> Result<String> {
        write_atomic(&self.out.join(rel), contents.as_bytes())?;
        Ok(rel.to_string())
    }
}

/// Loads and checks every input before any stage runs.
fn preflight(cfg: &PipelineConfig) -> Result<(CameraRig, SkeletonModel, Vec<DatasetState>)> {
    cfg.validate()?;
    for (name, path) in cfg.input_files() {
        if !path.is_file() {
            return Err(Error::invalid(format!("{name} file not found: {}", path.display())));
        }
    }
    let rig = match &cfg.inputs.rig {
        Some(p) => load_rig(cfg.resolve(p))?,
        None => CameraRig::synthetic(),
    };
    let model = match &cfg.inputs.skeleton {
        Some(p) => SkeletonModel::from_path(cfg.resolve(p))?,
        None => SkeletonModel::cheetah(),
    };
    let plan = cfg.plan();
    let mut datasets = Vec::new();
    if !plan.contains(&Stage::Synth) {
        let path = cfg.resolve(cfg.inputs.keypoints.as_ref().expect("validated"));
        let obs = read_keypoints(cfg, &path, &rig, &model)?;
        let labels = match &cfg.inputs.labels {
            Some(p) => read_keypoints(cfg, &cfg.resolve(p), &rig, &model)?,
            None => obs.clone(),
        };
        let truth = match &cfg.inputs.ground_truth {
            Some(p) => {
                let gt = GroundTruth::load(&cfg.resolve(p))?;
                if gt.frames.len() != obs.len() {
                    return Err(Error::invalid(format!(
                        "ground truth has {} frames, keypoints {}",
                        gt.frames.len(),
                        obs.len()
                    )));
                }
                Some(gt.clouds()?)
            }
            None => None,
        };
        if obs.is_empty() {
            return Err(Error::invalid(format!("keypoints file {} has no rows", path.display())));
        }
        datasets.push(DatasetState {
            name: INPUT_DATASET.to_string(),
            obs,
            labels,
            truth,
            estimates: Vec::new(),
        });
    }
    if plan.contains(&Stage::ExportScene) {
        if let Some(name) = &cfg.export.dataset {
            let known: Vec<String> = if plan.contains(&Stage::Synth) {
                cfg.synth.datasets(cfg.seed).into_iter().map(|d| d.name).collect()
            } else {
                vec![INPUT_DATASET.to_string()]
            };
            if !known.contains(name) {
                return Err(Error::invalid(format!(
                    "export.dataset '{name}' is not one of: {}",
                    known.join(", ")
                )));
            }
        }
    }
    Ok((rig, model, datasets))
}

fn read_keypoints(cfg: &PipelineConfig, path: &Path, rig: &CameraRig, model: &SkeletonModel) -> Result<ObservationSet> {
    let text = read_text(path)?;
    let file = match &cfg.inputs.columns {
        None => KeypointFile::parse(&text)?,
        Some(mapping) => KeypointFile::parse_with_mapping(
            &text,
            mapping,
            KeypointHeader {
                rig_id: rig.rig_id.clone(),
                frame_rate: rig.frame_rate,
                marker_names: model.markers.clone(),
                frames: None,
            },
        )?,
    };
    file.to_observations(rig, model)
}

/// Runs the configured stages. Pre-flight problems return a validation
/// error before anything is written; a failing stage leaves earlier
/// artifacts and a manifest that marks the run incomplete.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome> {
    let (rig, model, datasets) = preflight(cfg)?;
    let plan = cfg.plan();
    let mut ctx = Context {
        cfg,
        out: cfg.out_path(),
        rig,
        model,
        datasets,
        report: None,
    };
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let mut manifest = Manifest {
        schema: MANIFEST_SCHEMA.to_string(),
        complete: false,
        stages: plan
            .iter()
            .map(|s| StageRecord {
                stage: *s,
                status: StageStatus::Pending,
                outputs: Vec::new(),
                message: None,
            })
            .collect(),
    };
    write_manifest(&ctx.out, &manifest)?;
    for (i, stage) in plan.iter().enumerate() {
        log::info!("stage {}", stage.name());
        match run_stage(&mut ctx, *stage) {
            Ok(outputs) => {
                manifest.stages[i].status = StageStatus::Complete;
                manifest.stages[i].outputs = outputs;
            }
            Err(e) => {
                manifest.stages[i].status = StageStatus::Failed;
                manifest.stages[i].message = Some(e.to_string());
                write_manifest(&ctx.out, &manifest)?;
                return Err(Error::Stage {
                    stage: stage.name().to_string(),
                    message: e.to_string(),
                });
            }
        }
        write_manifest(&ctx.out, &manifest)?;
    }
    manifest.complete = true;
    write_manifest(&ctx.out, &manifest)?;
    Ok(RunOutcome {
        out_dir: ctx.out,
        plan,
        manifest,
        datasets: ctx.datasets,
        report: ctx.report,
    })
}

fn write_manifest(out: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())
}

fn run_stage(ctx: &mut Context<'_>, stage: Stage) -> Result<Vec<String>> {
    match stage {
        Stage::Synth => synth_stage(ctx),
        Stage::Triangulate | Stage::Ekf | Stage::Fte => estimator_stage(ctx, stage),
        Stage::Score => score_stage(ctx),
        Stage::ExportScene => scene_stage(ctx),
    }
}

fn synth_stage(ctx: &mut Context<'_>) -> Result<Vec<String>> {
    let cfg = &ctx.cfg.synth;
    let run = generate_run(&ctx.model, &ctx.rig, cfg.frames, &cfg.gait)?;
    let mut outputs = vec![ctx.write(GROUND_TRUTH_FILE, &GroundTruth::from_run(&run, &ctx.model).to_json())?];
    ctx.datasets.clear();
    for d in cfg.datasets(ctx.cfg.seed) {
        let obs = corrupt(&run.clean_obs, &d.corruption);
        let csv = KeypointFile::from_observations(&obs, &ctx.rig, &ctx.model.markers).to_csv();
        outputs.push(ctx.write(&format!("{}/keypoints.csv", d.name), &csv)?);
        ctx.datasets.push(DatasetState {
            name: d.name,
            obs,
            labels: run.clean_obs.clone(),
            truth: Some(run.markers.clone()),
            estimates: Vec::new(),
        });
    }
    Ok(outputs)
}

fn triangulated_points(ds: &DatasetState) -> Result<Vec<Vec<Option<Vector3<f64>>>>> {
    let tri = ds
        .estimate(Method::Triangulation)
        .ok_or_else(|| Error::invalid(format!("dataset {}: triangulation has not run", ds.name)))?;
    Ok(tri.frames.iter().map(|f| f.markers.clone()).collect())
}

fn estimate(ctx: &Context<'_>, ds: &DatasetState, stage: Stage) -> Result<TrajectoryEstimate> {
    let cfg = ctx.cfg;
    match stage {
        Stage::Triangulate => Ok(to_estimate(&triangulate_trajectory(&ds.obs, &ctx.rig, &cfg.triangulation))),
        Stage::Ekf => {
            let ekf_cfg = EkfConfig {
                dt: ctx.rig.dt(),
                ..cfg.ekf.clone()
            };
            let roots = root_poses_for_run(&ctx.model, &triangulated_points(ds)?);
            let init = EkfState::initial(&initial_poses(&ctx.model, &roots[..1])[0], &ekf_cfg);
            Ok(run_ekf(&ds.obs, &ctx.rig, &ctx.model, &ekf_cfg, init))
        }
        Stage::Fte => {
            let roots = root_poses_for_run(&ctx.model, &triangulated_points(ds)?);
            let init = initial_poses(&ctx.model, &roots);
            Ok(solve_fte(&ds.obs, &ctx.rig, &ctx.model, &cfg.fte, &init)?.estimate)
        }
        _ => unreachable!("not an estimator stage"),
    }
}

fn estimator_stage(ctx: &mut Context<'_>, stage: Stage) -> Result<Vec<String>> {
    let results: Vec<Result<TrajectoryEstimate>> = {
        let shared: &Context<'_> = ctx;
        shared
            .datasets
            .par_iter()
            .map(|ds| estimate(shared, ds, stage))
            .collect()
    };
    let mut outputs = Vec::new();
    for (i, result) in results.into_iter().enumerate() {
        let est = result?;
        let name = ctx.datasets[i].name.clone();
        for s in est.solver.iter().filter_map(|s| s.warning.as_ref()) {
            log::warn!("{name}: {s}");
        }
        let file = TrajectoryFile {
            schema: TRAJECTORY_SCHEMA.to_string(),
            dataset: name.clone(),
            marker_names: ctx.model.markers.clone(),
            estimate: est,
        };
        let mut text = serde_json::to_string_pretty(&file).expect("trajectory serializes");
        text.push('\n');
        outputs.push(ctx.write(&format!("{name}/{}", trajectory_file_name(file.estimate.method)), &text)?);
        let ds = &mut ctx.datasets[i];
        ds.estimates.retain(|e| e.method != file.estimate.method);
        ds.estimates.push(file.estimate);
    }
    Ok(outputs)
}

fn score_stage(ctx: &mut Context<'_>) -> Result<Vec<String>> {
    let mut report = ScoreReport::new(ctx.model.markers.clone());
    for ds in &ctx.datasets {
        for method in Method::ALL {
            if let Some(est) = ds.estimate(method) {
                report.entries.push(ScoreEntry::compute(
                    &ds.name,
                    est,
                    &ds.labels,
                    ds.truth.as_deref(),
                    &ctx.rig,
                )?);
            }
        }
    }
    let outputs = vec![
        ctx.write(SCORE_JSON_FILE, &report.to_json())?,
        ctx.write(SCORE_CSV_FILE, &report.to_csv())?,
    ];
    ctx.report = Some(report);
    Ok(outputs)
}

fn scene_stage(ctx: &mut Context<'_>) -> Result<Vec<String>> {
    let method = ctx.cfg.export.method;
    let ds = match &ctx.cfg.export.dataset {
        Some(name) => ctx.datasets.iter().find(|d| &d.name == name),
        None => ctx.datasets.first(),
    }
    .ok_or_else(|| Error::invalid("no dataset to export"))?;
    let est = ds
        .estimate(method)
        .ok_or_else(|| Error::invalid(format!("dataset {}: no {method} estimate to export", ds.name)))?;
    export_scene(&ds.name, est, &ds.obs, &ctx.rig, &ctx.model, &ctx.out.join(SCENE_FILE))?;
    Ok(vec![SCENE_FILE.to_string()])
}
