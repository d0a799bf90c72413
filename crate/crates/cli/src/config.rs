//! Command configurations: JSON files plus `--set key=value` dotted-path
//! overrides applied before deserialization.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use xms_core::data::{AffineSpec, SceneSpec};
use xms_core::model::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationGrid {
    pub noise_sigmas: Vec<f64>,
    pub speckle_sigmas: Vec<f64>,
    pub affines: Vec<AffineSpec>,
}

impl Default for DegradationGrid {
    fn default() -> Self {
        DegradationGrid {
            noise_sigmas: vec![0.0],
            speckle_sigmas: vec![0.0],
            affines: vec![AffineSpec::default()],
        }
    }
}

impl DegradationGrid {
    /// Cross product in (noise, speckle, affine) order.
    pub fn cells(&self) -> Vec<xms_core::data::DegradationSpec> {
        let mut out = Vec::new();
        for &noise in &self.noise_sigmas {
            for &speckle in &self.speckle_sigmas {
                for affine in &self.affines {
                    out.push(xms_core::data::DegradationSpec {
                        noise_sigma: noise,
                        speckle_sigma: speckle,
                        affine: *affine,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub out_dir: PathBuf,
    pub samples_per_cell: usize,
    pub base_seed: u64,
    pub scene: SceneSpec,
    pub grid: DegradationGrid,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            out_dir: PathBuf::from("dataset"),
            samples_per_cell: 8,
            base_seed: 0,
            scene: SceneSpec::default(),
            grid: DegradationGrid::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_steps: Option<u64>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub checkpoint_every: Option<u64>,
    /// Resume from this checkpoint; its config hash must match `model`.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("dataset"),
            out_dir: PathBuf::from("runs/train"),
            model: ModelConfig::default(),
            steps: 100,
            batch_size: 1,
            lr: 1e-4,
            lr_decay_steps: None,
            lr_decay_factor: 10.0,
            seed: 0,
            checkpoint_every: None,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub dump_predictions: bool,
    /// Validation stub: score the ground truth as if it were the prediction.
    pub use_gt_stub: bool,
    /// When set, the checkpoint's config hash must equal this hex string.
    pub expect_config_hash: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: PathBuf::from("runs/train/final.xmsc"),
            dataset: PathBuf::from("dataset"),
            out_dir: PathBuf::from("runs/eval"),
            dump_predictions: false,
            use_gt_stub: false,
            expect_config_hash: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub selector: String,
    pub eps: f64,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            selector: "all".into(),
            eps: xms_core::registry::DEFAULT_EPS,
            seed: 11,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub scene: SceneSpec,
    pub grid: DegradationGrid,
    pub samples_per_cell: usize,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            checkpoint: PathBuf::from("runs/train/final.xmsc"),
            out_dir: PathBuf::from("runs/sweep"),
            scene: SceneSpec::default(),
            grid: DegradationGrid::default(),
            samples_per_cell: 16,
            seeds: vec![0, 1, 2],
        }
    }
}

/// Parse a `--set key.path=value` override. The value is parsed as JSON
/// when possible and falls back to a plain string.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> anyhow::Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow::anyhow!("--set expects key.path=value, got '{spec}'"))?;
    let value: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if let Ok(idx) = seg.parse::<usize>() {
            let arr = cursor
                .as_array_mut()
                .ok_or_else(|| anyhow::anyhow!("'{seg}' indexes a non-array in '{path}'"))?;
            if idx >= arr.len() {
                anyhow::bail!("index {idx} out of range in '{path}'");
            }
            if last {
                arr[idx] = value;
                return Ok(());
            }
            cursor = &mut arr[idx];
        } else {
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| anyhow::anyhow!("'{seg}' indexes a non-object in '{path}'"))?;
            if last {
                obj.insert(seg.to_string(), value);
                return Ok(());
            }
            cursor = obj
                .entry(seg.to_string())
                .or_insert(serde_json::Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Load a config file (or defaults when absent) and apply overrides.
pub fn load_config<C: DeserializeOwned + Serialize + Default>(
    path: Option<&Path>,
    sets: &[String],
) -> anyhow::Result<C> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| anyhow::anyhow!("config {} is not valid JSON: {e}", p.display()))?
        }
        None => serde_json::to_value(C::default())?,
    };
    for spec in sets {
        apply_override(&mut value, spec)?;
    }
    Ok(serde_json::from_value(value)
        .map_err(|e| anyhow::anyhow!("config does not match the expected schema: {e}"))?)
}
