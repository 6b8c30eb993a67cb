//! Run configuration: one TOML file drives every command. Keys left out are
//! filled from the selected preset; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::dataset::synthetic::SyntheticConfig;
use crate::dataset::PreprocessConfig;
use crate::diffusion::{ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::fsutil::sha256_hex;
use crate::inference::DEFAULT_STEPS;
use crate::metrics::{DetectorKind, ExtractorKind, ThresholdDetector};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(vec![format!("preset: unknown preset '{other}' (expected desk or paper)")])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_root: PathBuf,
    pub cache_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub eval_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            cache_dir: "runs/cache".into(),
            checkpoint_dir: "runs/checkpoints".into(),
            output_dir: "runs/reconstructions".into(),
            eval_dir: "runs/eval".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.data_root, &mut self.cache_dir, &mut self.checkpoint_dir, &mut self.output_dir, &mut self.eval_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Synthetic phantom cohort for `synth-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub subjects: usize,
    pub phantom: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    pub steps: usize,
    pub seed: u64,
    /// Reconstruct at most this many test slices; 0 means all.
    pub limit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub extractor: ExtractorKind,
    pub detector: DetectorKind,
    pub write_csv: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSection,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub inference: InferenceSection,
    pub evaluate: EvaluateSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                preset,
                seed: 0,
                paths: Paths::default(),
                synth: SynthSection { subjects: 12, phantom: SyntheticConfig::default() },
                preprocess: PreprocessConfig::desk(),
                model: ModelConfig::desk(),
                stage1: TrainConfig::desk_stage1(),
                stage2: TrainConfig::desk_stage2(),
                inference: InferenceSection { steps: DEFAULT_STEPS, seed: 0, limit: 8 },
                evaluate: EvaluateSection {
                    extractor: ExtractorKind::Desk,
                    detector: DetectorKind::Threshold(ThresholdDetector::desk()),
                    write_csv: true,
                },
            },
            Preset::Paper => Self {
                preset,
                seed: 0,
                paths: Paths::default(),
                synth: SynthSection {
                    subjects: 12,
                    phantom: SyntheticConfig { height: 240, width: 240, depth: 155, ..SyntheticConfig::default() },
                },
                preprocess: PreprocessConfig::paper(),
                model: ModelConfig::paper(),
                stage1: TrainConfig::paper_stage1(),
                stage2: TrainConfig::paper_stage2(),
                inference: InferenceSection { steps: DEFAULT_STEPS, seed: 0, limit: 0 },
                evaluate: EvaluateSection {
                    extractor: ExtractorKind::Pretrained { weights: "inception-v3".into() },
                    detector: DetectorKind::Segmenter { weights: "brats-segmenter".into() },
                    write_csv: true,
                },
            },
        }
    }

    /// Sets the global seed and every per-section seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.init_seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self.inference.seed = seed;
    }

    /// Cross-field checks, reported per key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.stage1.stage != Stage::Stage1 {
            out.push("stage1.stage: must be \"stage1\"".to_string());
        }
        if self.stage2.stage != Stage::Stage2 {
            out.push("stage2.stage: must be \"stage2\"".to_string());
        }
        out.extend(self.stage1.problems("stage1"));
        out.extend(self.stage2.problems("stage2"));
        if self.model.image_size != self.preprocess.out_size {
            out.push(format!(
                "model.image_size: {} differs from preprocess.out_size {}",
                self.model.image_size, self.preprocess.out_size
            ));
        }
        if self.preprocess.slice_lo > self.preprocess.slice_hi {
            out.push("preprocess.slice_lo: must not exceed slice_hi".into());
        }
        if !(0.0..1.0).contains(&self.preprocess.split_ratio) || self.preprocess.split_ratio == 0.0 {
            out.push("preprocess.split_ratio: must lie in (0, 1)".into());
        }
        if self.inference.steps == 0 || self.inference.steps > self.model.timesteps {
            out.push(format!("inference.steps: must lie in [1, {}]", self.model.timesteps));
        }
        if self.synth.subjects < 2 {
            out.push("synth.subjects: at least 2 subjects are needed for a split".into());
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// sha256 of the canonical JSON form without the `paths` section, so
    /// relocating a run does not change its hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is an object").remove("paths");
        sha256_hex(v.to_string().as_bytes())
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Overlays `user` on `base`, collecting unknown keys and type mismatches.
fn merge(base: &mut Value, user: Value, key: &str, errors: &mut Vec<String>) {
    match (base, user) {
        (Value::Table(b), Value::Table(u)) => {
            let kinds_differ = matches!((b.get("kind"), u.get("kind")), (Some(x), Some(y)) if x != y);
            if kinds_differ {
                *b = u;
                return;
            }
            for (k, v) in u {
                let sub = if key.is_empty() { k.clone() } else { format!("{key}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub, errors),
                    None => errors.push(format!("{sub}: unknown key")),
                }
            }
        }
        (b @ Value::Float(_), Value::Integer(i)) => *b = Value::Float(i as f64),
        (b, u) if std::mem::discriminant(b) == std::mem::discriminant(&u) => *b = u,
        (b, u) => errors.push(format!("{key}: expected {}, found {} `{u}`", type_name(b), type_name(&u))),
    }
}

/// Parses and validates a TOML document. `preset_override` wins over the
/// file's `preset` key; relative paths resolve against `base_dir`.
pub fn parse_config(text: &str, preset_override: Option<Preset>, base_dir: &Path) -> Result<RunConfig> {
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![format!("syntax: {}", e.message())]))?;
    let preset = match (preset_override, user.get("preset")) {
        (Some(p), _) => p,
        (None, Some(Value::String(s))) => s.parse()?,
        (None, Some(other)) => return Err(Error::Config(vec![format!("preset: expected string, found {}", type_name(other))])),
        (None, None) => Preset::Desk,
    };
    let defaults = RunConfig::preset(preset);
    let mut merged = Value::try_from(&defaults).expect("preset serializes");
    let mut errors = Vec::new();
    let mut user = user;
    user.insert("preset".into(), Value::String(format!("{preset:?}").to_lowercase()));
    let user_seed = user.get("seed").cloned();
    merge(&mut merged, Value::Table(user), "", &mut errors);
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(merged)
        .map_err(|e| Error::Config(vec![format!("{}: {}", e.path(), e.inner().message())]))?;
    if let Some(Value::Integer(s)) = user_seed {
        let s = u64::try_from(s).map_err(|_| Error::Config(vec!["seed: must be non-negative".into()]))?;
        let explicit = text.parse::<toml::Table>().expect("parsed above");
        let section_seed = |sec: &str| explicit.get(sec).and_then(|t| t.get("seed").or_else(|| t.get("init_seed"))).is_some();
        if !section_seed("model") {
            cfg.model.init_seed = s;
        }
        if !section_seed("stage1") {
            cfg.stage1.seed = s;
        }
        if !section_seed("stage2") {
            cfg.stage2.seed = s;
        }
        if !section_seed("inference") {
            cfg.inference.seed = s;
        }
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    cfg.paths.resolve(base_dir);
    Ok(cfg)
}

pub fn load_config(path: &Path, preset_override: Option<Preset>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(vec![format!("config file {} not found", path.display())]),
        _ => Error::io(path, e),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, preset_override, base)
}
