//! Pipeline configuration: one JSON file plus `--set a.b.c=value` overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use rcv_core::boxops::{ApMode, NMS_TAU};
use rcv_core::detect::{ClassTable, Detector, DetectorNoise, ExternalConfig, ExternalDetector, OracleDetector};
use rcv_core::io;
use rcv_core::recursion::RecursionConfig;
use rcv_core::synthscene::SceneSpec;

/// Environment variable that overrides `scratch_dir`.
pub const SCRATCH_ENV: &str = "RCV_SCRATCH";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    File(#[from] io::IoError),
    #[error("invalid override {0:?}: expected key=value")]
    BadOverride(String),
    #[error("override {key}: {msg}")]
    Override { key: String, msg: String },
    #[error("{origin}: {msg}")]
    Invalid { origin: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorSpec {
    /// Reads synthetic instance ids; needs ground truth in the manifest.
    Oracle {
        #[serde(default)]
        noise: DetectorNoise,
    },
    /// Child process speaking the line protocol.
    External {
        command: Vec<String>,
        #[serde(default = "one")]
        pool_size: usize,
    },
}

fn one() -> usize {
    1
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec::Oracle {
            noise: DetectorNoise::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.15,
            mode: ApMode::AllPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub recursion: RecursionConfig,
    pub detector_rgb: DetectorSpec,
    pub detector_pv: DetectorSpec,
    pub nms_tau: f64,
    pub eval: EvalConfig,
    pub scratch_dir: PathBuf,
    /// Frustums processed concurrently.
    pub parallelism: usize,
    /// Base spec for `synth` and `sweep`; the seed is replaced per scene.
    pub synth: SceneSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            recursion: RecursionConfig::default(),
            detector_rgb: DetectorSpec::default(),
            detector_pv: DetectorSpec::default(),
            nms_tau: NMS_TAU,
            eval: EvalConfig::default(),
            scratch_dir: std::env::temp_dir().join("rcv"),
            parallelism: 1,
            synth: SceneSpec::default(),
        }
    }
}

/// Sets `root[path] = value`, creating intermediate objects.
fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let err = |msg: &str| ConfigError::Override {
        key: key.to_string(),
        msg: msg.to_string(),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err("empty path segment"));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| err(&format!("{p} is inside a non-object value")))?;
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| err("parent is not an object"))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// `key=value`; the value is JSON when it parses as JSON, a string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::BadOverride(s.to_string()))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl PipelineConfig {
    /// Loads `path` (or the defaults), applies overrides, then `RCV_SCRATCH`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let (mut value, origin) = match path {
            Some(p) => (io::read_json::<Value>(p)?, p.display().to_string()),
            None => (
                serde_json::to_value(PipelineConfig::default()).expect("default config serializes"),
                "default config".to_string(),
            ),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_dotted(&mut value, &k, v)?;
        }
        let mut cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| ConfigError::Invalid {
            origin: origin.clone(),
            msg: e.to_string(),
        })?;
        if let Some(s) = std::env::var_os(SCRATCH_ENV) {
            cfg.scratch_dir = PathBuf::from(s);
        }
        cfg.validate().map_err(|msg| ConfigError::Invalid { origin, msg })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.recursion.validate().map_err(|e| e.to_string())?;
        self.synth.validate().map_err(|e| e.to_string())?;
        if !(self.nms_tau > 0.0 && self.nms_tau <= 1.0) {
            return Err(format!("nms_tau must be in (0, 1], got {}", self.nms_tau));
        }
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh <= 1.0) {
            return Err(format!("eval.iou_thresh must be in (0, 1], got {}", self.eval.iou_thresh));
        }
        if self.parallelism == 0 {
            return Err("parallelism must be at least 1".into());
        }
        for (name, d) in [("detector_rgb", &self.detector_rgb), ("detector_pv", &self.detector_pv)] {
            match d {
                DetectorSpec::Oracle { noise } => noise.validate().map_err(|e| format!("{name}.noise: {e}"))?,
                DetectorSpec::External { command, pool_size } => {
                    let prog = command.first().ok_or_else(|| format!("{name}.command is empty"))?;
                    if find_program(prog).is_none() {
                        return Err(format!("{name}.command: program {prog:?} not found"));
                    }
                    if *pool_size == 0 {
                        return Err(format!("{name}.pool_size must be at least 1"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Resolves a program the way a shell would: paths as given, bare names on PATH.
pub fn find_program(prog: &str) -> Option<PathBuf> {
    let p = Path::new(prog);
    if p.components().count() > 1 {
        return p.is_file().then(|| p.to_path_buf());
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|d| d.join(prog))
            .find(|c| c.is_file())
    })
}

/// A configured detector, ready to be specialised to one frame.
#[derive(Clone)]
pub enum DetectorHandle {
    Oracle(DetectorNoise),
    External(Arc<ExternalDetector>),
}

impl DetectorHandle {
    pub fn build(spec: &DetectorSpec, scratch_dir: &Path) -> anyhow::Result<Self> {
        Ok(match spec {
            DetectorSpec::Oracle { noise } => DetectorHandle::Oracle(*noise),
            DetectorSpec::External { command, pool_size } => {
                DetectorHandle::External(Arc::new(ExternalDetector::spawn(&ExternalConfig {
                    command: command.clone(),
                    scratch_dir: scratch_dir.to_path_buf(),
                    pool_size: *pool_size,
                })?))
            }
        })
    }

    /// The oracle needs the frame's instance → class table.
    pub fn for_frame(&self, classes: Option<&ClassTable>) -> anyhow::Result<Box<dyn Detector>> {
        Ok(match self {
            DetectorHandle::Oracle(noise) => {
                let classes = classes
                    .ok_or_else(|| anyhow::anyhow!("the oracle detector needs gt_boxes and instance ids in the manifest"))?;
                Box::new(OracleDetector::new(classes.clone(), *noise))
            }
            DetectorHandle::External(d) => Box::new(d.clone()),
        })
    }
}
