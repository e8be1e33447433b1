//! Run configuration: one strict JSON document per run.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use tcr_core::decoding::{AttentionPolicy, DecodeMode};
use tcr_core::model::train::Schedule;
use tcr_core::model::ModelConfig;
use tcr_core::refinement::RefinementConfig;

use crate::Usage;

pub const SEED_ENV: &str = "TCR_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds training, masking, dropout and synthesis. `schedule.seed` follows it.
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub refinement: RefinementConfig,
    pub decode: DecodeMode,
    /// Attention aggregation used for cover selection at generation time.
    pub attention: AttentionPolicy,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Tiny)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 2 layers, 2 heads, hidden 32; learning rate 1e-3.
    Tiny,
    /// 12 layers, 12 heads, hidden 768; learning rate 1e-5.
    Base,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, learning_rate) = match preset {
            Preset::Tiny => (ModelConfig::tiny(64), 1e-3),
            Preset::Base => (ModelConfig::default(), 1e-5),
        };
        RunConfig {
            seed: 0,
            model,
            schedule: Schedule {
                learning_rate,
                ..Default::default()
            },
            refinement: RefinementConfig::default(),
            decode: DecodeMode::default(),
            attention: AttentionPolicy::default(),
            paths: Paths::default(),
        }
    }

    /// Reads `path` (or the preset when absent), applies `TCR_SEED`, and validates.
    pub fn load(path: Option<&Path>, preset: Preset) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let base = serde_json::to_value(RunConfig::preset(preset))?;
                let mut value: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", p.display())))?;
                merge_defaults(&mut value, &base);
                let mut c: RunConfig =
                    serde_json::from_value(value).map_err(|e| Usage(format!("{}: {e}", p.display())))?;
                if c.schedule.seed != 0 && c.schedule.seed != c.seed {
                    return Err(Usage("schedule.seed differs from seed; set only seed".into()).into());
                }
                c.schedule.seed = c.seed;
                c
            }
            None => RunConfig::preset(preset),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            config.seed = s
                .trim()
                .parse()
                .map_err(|_| Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        config.schedule.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.refinement.validate()?;
        if let DecodeMode::Beam { width: 0 } = self.decode {
            return Err(Usage("beam width must be at least 1".into()).into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Fills section keys missing from `value` with the preset's, so partial
/// files work against either preset while unknown keys still fail.
fn merge_defaults(value: &mut serde_json::Value, base: &serde_json::Value) {
    let Some(top) = value.as_object_mut() else {
        return;
    };
    for section in ["model", "schedule", "refinement"] {
        if let (Some(v), Some(b)) = (
            top.get_mut(section).and_then(|v| v.as_object_mut()),
            base.get(section).and_then(|b| b.as_object()),
        ) {
            for (k, bv) in b {
                v.entry(k.clone()).or_insert_with(|| bv.clone());
            }
        }
    }
    for (k, bv) in base.as_object().into_iter().flatten() {
        top.entry(k.clone()).or_insert_with(|| bv.clone());
    }
}
