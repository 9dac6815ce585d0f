use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::keypoints::ColumnMapping;
use crate::ekf::EkfConfig;
use crate::error::{Error, Result};
use crate::fte::FteConfig;
use crate::observation::Method;
use crate::synth::{grid, Dataset, GaitProfile};
use crate::triangulate::TriangulationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Triangulate,
    Ekf,
    Fte,
    Score,
    ExportScene,
}

impl Stage {
    /// Topological order of the stage graph.
    pub const ORDER: [Stage; 6] = [
        Stage::Synth,
        Stage::Triangulate,
        Stage::Ekf,
        Stage::Fte,
        Stage::Score,
        Stage::ExportScene,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Triangulate => "triangulate",
            Stage::Ekf => "ekf",
            Stage::Fte => "fte",
            Stage::Score => "score",
            Stage::ExportScene => "export-scene",
        }
    }

    pub fn for_method(method: Method) -> Stage {
        match method {
            Method::Triangulation => Stage::Triangulate,
            Method::Ekf => Stage::Ekf,
            Method::Fte => Stage::Fte,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Calibration file; the built-in synthetic rig when absent.
    pub rig: Option<PathBuf>,
    /// Skeleton file; the built-in cheetah when absent.
    pub skeleton: Option<PathBuf>,
    /// Detections. Required unless the synth stage runs.
    pub keypoints: Option<PathBuf>,
    /// Column mapping for detector exports that are not in the native format.
    pub columns: Option<ColumnMapping>,
    /// 2D reference points for scoring; the detections themselves when absent.
    pub labels: Option<PathBuf>,
    /// 3D ground truth for scoring.
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub sigma_n: Vec<f64>,
    pub p_o: Vec<f64>,
    pub sigma_o: f64,
    pub outlier_likelihood: f64,
    pub gait: GaitProfile,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 100,
            sigma_n: vec![0.0, 5.0, 10.0],
            p_o: vec![0.0, 0.02, 0.05],
            sigma_o: 100.0,
            outlier_likelihood: 1.0,
            gait: GaitProfile::gallop(),
        }
    }
}

impl SynthConfig {
    pub fn datasets(&self, seed: u64) -> Vec<Dataset> {
        let mut out = grid(&self.sigma_n, &self.p_o, self.sigma_o, seed);
        for d in &mut out {
            d.corruption.outlier_likelihood = self.outlier_likelihood;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    /// Dataset to export; the first one when absent.
    pub dataset: Option<String>,
    pub method: Method,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            dataset: None,
            method: Method::Fte,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Requested stages; dependencies are added automatically.
    pub stages: Vec<Stage>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub inputs: Inputs,
    pub synth: SynthConfig,
    pub triangulation: TriangulationConfig,
    pub ekf: EkfConfig,
    pub fte: FteConfig,
    pub export: ExportConfig,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stages: vec![
                Stage::Synth,
                Stage::Triangulate,
                Stage::Ekf,
                Stage::Fte,
                Stage::Score,
            ],
            seed: 0,
            out_dir: PathBuf::from("out"),
            inputs: Inputs::default(),
            synth: SynthConfig::default(),
            triangulation: TriangulationConfig::default(),
            ekf: EkfConfig::default(),
            fte: FteConfig::default(),
            export: ExportConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::parse("config", e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn out_path(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    /// Requested stages plus everything they depend on, in execution order.
    pub fn plan(&self) -> Vec<Stage> {
        let mut want = [false; 6];
        let idx = |s: Stage| Stage::ORDER.iter().position(|o| *o == s).expect("stage in order");
        for s in &self.stages {
            want[idx(*s)] = true;
        }
        // Walk backwards so that every added dependency is itself expanded.
        for i in (0..Stage::ORDER.len()).rev() {
            if !want[i] {
                continue;
            }
            let deps: Vec<Stage> = match Stage::ORDER[i] {
                Stage::Synth => vec![],
                Stage::Triangulate if self.inputs.keypoints.is_none() => vec![Stage::Synth],
                Stage::Triangulate => vec![],
                Stage::Ekf | Stage::Fte => vec![Stage::Triangulate],
                Stage::Score => vec![Stage::Triangulate, Stage::Ekf, Stage::Fte],
                Stage::ExportScene => vec![Stage::for_method(self.export.method)],
            };
            for d in deps {
                want[idx(d)] = true;
            }
        }
        Stage::ORDER
            .iter()
            .zip(want)
            .filter_map(|(s, w)| w.then_some(*s))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.triangulation.validate()?;
        self.ekf.validate()?;
        self.fte.validate()?;
        if self.stages.is_empty() {
            return Err(Error::invalid("config: no stages requested"));
        }
        let plan = self.plan();
        if plan.contains(&Stage::Synth) {
            if self.synth.frames < 2 {
                return Err(Error::invalid("config: synth.frames must be at least 2"));
            }
            if self.synth.sigma_n.is_empty() || self.synth.p_o.is_empty() {
                return Err(Error::invalid("config: synth grid is empty"));
            }
            for d in self.synth.datasets(self.seed) {
                d.corruption.validate()?;
            }
        } else if self.inputs.keypoints.is_none() {
            return Err(Error::invalid(
                "config: inputs.keypoints is required when the synth stage does not run",
            ));
        }
        Ok(())
    }

    /// Every input file the plan will read, for the pre-flight check.
    pub fn input_files(&self) -> Vec<(&'static str, PathBuf)> {
        let synth = self.plan().contains(&Stage::Synth);
        let i = &self.inputs;
        let mut out = Vec::new();
        for (name, p) in [("rig", &i.rig), ("skeleton", &i.skeleton)] {
            if let Some(p) = p {
                out.push((name, self.resolve(p)));
            }
        }
        if !synth {
            for (name, p) in [
                ("keypoints", &i.keypoints),
                ("labels", &i.labels),
                ("ground_truth", &i.ground_truth),
            ] {
                if let Some(p) = p {
                    out.push((name, self.resolve(p)));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_adds_dependencies_in_order() {
        let cfg = PipelineConfig {
            stages: vec![Stage::Score],
            ..Default::default()
        };
        assert_eq!(
            cfg.plan(),
            vec![Stage::Synth, Stage::Triangulate, Stage::Ekf, Stage::Fte, Stage::Score]
        );
        let mut cfg = PipelineConfig {
            stages: vec![Stage::Fte],
            ..Default::default()
        };
        cfg.inputs.keypoints = Some("k.csv".into());
        assert_eq!(cfg.plan(), vec![Stage::Triangulate, Stage::Fte]);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml(), Path::new(".")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = PipelineConfig::from_toml("stagez = []", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("stagez"));
    }
}
