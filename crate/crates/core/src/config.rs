//! Run configuration: one TOML section per subsystem, `key = value` inside.
//!
//! Overrides use `section.key=value` or a bare `key=value` when the key name
//! is unique across sections. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::augment::SpecAugmentConfig;
use crate::conformer::BlockConfig;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::heads::HeadConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub train_corpus: Option<String>,
    /// Falls back to the training corpus when unset.
    pub dev_corpus: Option<String>,
    pub output_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            train_corpus: None,
            dev_corpus: None,
            output_dir: "run".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusSpec,
    pub frontend: FrontendConfig,
    pub blocks: BlockConfig,
    pub heads: HeadConfig,
    pub augment: SpecAugmentConfig,
    pub optim: OptimConfig,
}

/// Keys that have no default value and so do not appear in a serialised
/// default config.
const OPTIONAL_KEYS: &[(&str, &str)] = &[
    ("run", "train_corpus"),
    ("run", "dev_corpus"),
    ("heads", "upsample_factor"),
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        let before = Self::from_table(table.clone())?;
        let mut touched = Vec::new();
        for o in overrides {
            touched.push(apply_override(&mut table, o)?);
        }
        let mut cfg = Self::from_table(table)?;
        let touched = |s: &str, k: &str| touched.iter().any(|(ts, tk)| ts == s && tk == k);
        if touched("blocks", "num_blocks") && !touched("heads", "intermediate_positions") {
            cfg.heads.intermediate_positions =
                rescale_positions(&before.heads.intermediate_positions, before.blocks.num_blocks, cfg.blocks.num_blocks);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_table(table: Table) -> Result<Self> {
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_with_overrides(&text, overrides)
    }

    /// Fully resolved config, suitable for writing next to run outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.corpus.feature_dim,
            frontend: self.frontend.clone(),
            blocks: self.blocks.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model_config().validate()?;
        self.optim.validate()?;
        if self.corpus.num_labels != self.heads.num_labels {
            return Err(Error::Config(format!(
                "corpus has {} labels but the heads predict {}",
                self.corpus.num_labels, self.heads.num_labels
            )));
        }
        Ok(())
    }
}

/// Keeps intermediate heads at the same relative depth when only the block
/// count changes, e.g. `[4, 8]` of 12 becomes `[2, 4]` of 6.
fn rescale_positions(positions: &[usize], from: usize, to: usize) -> Vec<usize> {
    positions
        .iter()
        .map(|&p| {
            let scaled = (p as f64 * to as f64 / from as f64).round() as usize;
            scaled.clamp(1, to.saturating_sub(1).max(1))
        })
        .collect()
}

fn known_keys() -> Vec<(String, String)> {
    let Value::Table(t) = Value::try_from(RunConfig::default()).expect("config serialises") else {
        unreachable!()
    };
    let mut keys: Vec<(String, String)> = t
        .iter()
        .flat_map(|(section, v)| {
            v.as_table()
                .into_iter()
                .flat_map(|s| s.keys())
                .map(move |k| (section.clone(), k.clone()))
        })
        .collect();
    keys.extend(OPTIONAL_KEYS.iter().map(|(s, k)| (s.to_string(), k.to_string())));
    keys
}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut Table, spec: &str) -> Result<(String, String)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let (section, name) = match key.split_once('.') {
        Some((s, k)) => (s.to_string(), k.to_string()),
        None => {
            let hits: Vec<String> = known_keys()
                .into_iter()
                .filter(|(_, k)| k == key)
                .map(|(s, _)| s)
                .collect();
            match hits.as_slice() {
                [s] => (s.clone(), key.to_string()),
                [] => return Err(Error::Config(format!("unknown config key {key:?}"))),
                _ => {
                    return Err(Error::Config(format!(
                        "config key {key:?} is ambiguous; qualify it with one of {hits:?}"
                    )))
                }
            }
        }
    };
    if !known_keys().iter().any(|(s, k)| *s == section && *k == name) {
        return Err(Error::Config(format!("unknown config key {section}.{name}")));
    }
    let entry = table
        .entry(section.clone())
        .or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(sec) = entry else {
        return Err(Error::Config(format!("{section} is not a section")));
    };
    sec.insert(name.clone(), parse_value(raw.trim()));
    Ok((section, name))
}
