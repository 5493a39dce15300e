//! Run configuration: a TOML file with one table per parameter group, plus
//! `section.key=value` overrides from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, SamplerConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, GenerationSettings};
use crate::model::ModelConfig;
use crate::pairgen::{Category, ContentSpec, StyleTransform};
use crate::training::{PretrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            kind: ScheduleKind::LinearBeta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.kind)
    }
}

/// The training pair and the pretraining corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub category: Category,
    pub transform: StyleTransform,
    pub variant_seed: u64,
    pub palette_seed: u64,
    pub style_slot: u8,
    pub corpus_size: usize,
    pub corpus_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            category: Category::Face,
            transform: StyleTransform::default(),
            variant_seed: 12345,
            palette_seed: 777,
            style_slot: 0,
            corpus_size: 2000,
            corpus_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn pair_spec(&self, image_size: usize) -> ContentSpec {
        ContentSpec {
            category: self.category,
            variant_seed: self.variant_seed,
            palette_seed: self.palette_seed,
            size: image_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub cfg_scale: f32,
    pub style_scale: f32,
    /// Plain CFG for the first `switch_step` inference steps.
    pub switch_step: usize,
    pub num_inference_steps: usize,
    /// Inversion depth for editing, as a fraction of `T`.
    pub invert_depth: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            cfg_scale: 5.0,
            style_scale: 3.0,
            switch_step: 10,
            num_inference_steps: 50,
            invert_depth: 0.6,
        }
    }
}

impl GuidanceSection {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            num_inference_steps: self.num_inference_steps,
        }
    }

    pub fn generation(&self) -> GenerationSettings {
        GenerationSettings {
            cfg_scale: self.cfg_scale,
            switch_step: self.switch_step,
            invert_depth: self.invert_depth,
            sampler: self.sampler(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceSection,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.schedule.build()?;
        self.guidance.sampler().timesteps(&self.schedule.build()?)?;
        if self.guidance.switch_step > self.guidance.num_inference_steps {
            return Err(Error::Config(format!(
                "guidance.switch_step {} exceeds num_inference_steps {}",
                self.guidance.switch_step, self.guidance.num_inference_steps
            )));
        }
        for (name, d) in [
            ("guidance.invert_depth", self.guidance.invert_depth),
            ("eval.invert_depth", self.eval.invert_depth),
        ] {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {d}")));
            }
        }
        if self.data.corpus_size == 0 {
            return Err(Error::Config("data.corpus_size must be positive".into()));
        }
        Ok(())
    }

    /// Generation settings for evaluation sweeps (the eval section's depth).
    pub fn eval_generation(&self) -> GenerationSettings {
        GenerationSettings {
            invert_depth: self.eval.invert_depth,
            ..self.guidance.generation()
        }
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.1\n", &[]).is_err());
        assert!(RunConfig::from_toml("[nonsense]\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["train.nope=1".into()]).is_err());
    }

    #[test]
    fn overrides_apply_after_file() {
        let cfg = RunConfig::from_toml(
            "[train]\nlr = 0.5\n",
            &[
                "train.lr=0.25".into(),
                "data.transform=outline-overlay:0.2".into(),
                "model.channels=[8, 8, 16, 16]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.25);
        assert_eq!(cfg.data.transform, StyleTransform::OutlineOverlay { threshold: 0.2 });
        assert_eq!(cfg.model.channels, [8, 8, 16, 16]);
        assert!(RunConfig::from_toml("", &["train.lr".into()]).is_err());
        assert!(RunConfig::from_toml("", &["guidance.switch_step=60".into()]).is_err());
    }
}
