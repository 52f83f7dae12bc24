//! Run configuration: a TOML file merged with command-line overrides.
//!
//! Precedence is CLI override > config file > built-in default. The fully
//! resolved configuration is dumped next to every command's outputs so any
//! run can be reproduced from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ShapeFamily;
use crate::error::{Error, Result};
use crate::infer::{FusionMode, InferOptions};
use crate::model::ModelConfig;
use crate::sliding::Blend;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Phantom cases generated by `gen-data`.
    pub cases: usize,
    pub grid: [usize; 3],
    pub num_classes: usize,
    pub modalities: usize,
    /// "ellipsoids" or "boxes".
    pub family: String,
    pub noise: f64,
    pub seed: u64,
    pub split_ratios: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            cases: 10,
            grid: [32, 32, 32],
            num_classes: 3,
            modalities: 1,
            family: "ellipsoids".into(),
            noise: 0.05,
            seed: 0,
            split_ratios: [0.7, 0.1, 0.2],
        }
    }
}

impl DataConfig {
    pub fn shape_family(&self) -> Result<ShapeFamily> {
        match self.family.as_str() {
            "ellipsoids" => Ok(ShapeFamily::NestedEllipsoids),
            "boxes" => Ok(ShapeFamily::NestedBoxes),
            other => Err(Error::Config(format!(
                "unknown shape family {other:?}; expected \"ellipsoids\" or \"boxes\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// DDIM steps K.
    pub ddim_steps: usize,
    pub eta: f64,
    pub patch_size: [usize; 3],
    pub overlap: f64,
    /// "gaussian" or "constant".
    pub blend: String,
    /// "argmax" or "threshold".
    pub decode: String,
    pub threshold: f64,
    pub use_fe: bool,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            ddim_steps: 10,
            eta: 0.0,
            patch_size: [32, 32, 32],
            overlap: 0.5,
            blend: "gaussian".into(),
            decode: "argmax".into(),
            threshold: 0.5,
            use_fe: true,
            seed: 0,
        }
    }
}

impl InferConfig {
    pub fn blend_mode(&self) -> Result<Blend> {
        match self.blend.as_str() {
            "gaussian" => Ok(Blend::Gaussian),
            "constant" => Ok(Blend::Constant),
            other => Err(Error::Config(format!(
                "unknown blend {other:?}; expected \"gaussian\" or \"constant\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    /// Stochastic trajectories S per step.
    pub samples: usize,
    /// Sigmoid divisor; defaults to the DDIM step count when absent.
    pub scale: Option<f64>,
    /// "suf", "simple", or "last-step".
    pub mode: String,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            samples: 4,
            scale: None,
            mode: "suf".into(),
        }
    }
}

impl FusionSection {
    pub fn fusion_mode(&self) -> Result<FusionMode> {
        match self.mode.as_str() {
            "suf" => Ok(FusionMode::Suf),
            "simple" => Ok(FusionMode::Simple),
            "last-step" => Ok(FusionMode::LastStep),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?}; expected \"suf\", \"simple\", or \"last-step\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub fusion: FusionSection,
    pub data: DataConfig,
}

impl RunConfig {
    /// Assemble the inference options shared by infer/eval/validation.
    pub fn infer_options(&self) -> Result<InferOptions> {
        Ok(InferOptions {
            ddim_steps: self.infer.ddim_steps,
            eta: self.infer.eta,
            num_samples: self.fusion.samples,
            fusion: self.fusion.fusion_mode()?,
            use_fe: self.infer.use_fe,
            patch_size: self.infer.patch_size,
            overlap: self.infer.overlap,
            blend: self.infer.blend_mode()?,
            seed: self.infer.seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.infer_options()?;
        self.data.shape_family()?;
        Ok(())
    }
}

/// Parse an override value with TOML scalar semantics, falling back to a
/// bare string (so `--override infer.blend=constant` needs no quotes).
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    if let Ok(table) = doc.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("override {spec:?} is not of the form key.path=value"))
    })?;
    let segments: Vec<&str> = key.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} has empty segments")));
    }
    let mut table = root;
    for seg in &segments[..segments.len() - 1] {
        table = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override key {key:?} descends into a non-table"))
            })?;
    }
    table.insert(
        segments.last().unwrap().to_string(),
        parse_value(raw.trim()),
    );
    Ok(())
}

/// Merge defaults, optional config file, and `--override k.path=v` flags.
/// `seed`, when given, replaces every per-section seed (master seed flag).
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut root: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for spec in overrides {
        apply_override(&mut root, spec)?;
    }
    let cfg: RunConfig = toml::Value::Table(root)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut cfg = cfg;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.infer.seed = s;
        cfg.data.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Write the resolved configuration next to a command's outputs.
pub fn dump_resolved(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let path = out_dir.join("resolved_config.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
