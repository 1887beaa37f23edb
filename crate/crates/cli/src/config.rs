//! Flat key=value run configuration with `[section]` headers.
//!
//! Grammar: blank lines and `#` comments are ignored; a line is either
//! `[section]` or `key = value`. Unknown keys are rejected so typos fail
//! loudly, and every error carries its line number.

use anyhow::{bail, Context, Result};
use bst_core::pruner::PruneConfig;
use bst_core::resmlp::ModelConfig;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSettings {
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSettings {
    Synthetic { samples: usize },
    Cifar10 { path: PathBuf },
}

/// Fully-resolved run configuration.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
}

impl RunConfig {
    /// Canonical single-line echo embedded in every emitted CSV/JSON.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

struct RawConfig {
    // section -> key -> (value, line)
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

fn parse_raw(text: &str) -> Result<RawConfig> {
    let mut sections: BTreeMap<String, BTreeMap<String, (String, usize)>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                bail!("config error at line {line_no}: unterminated section header");
            };
            current = Some(name.trim().to_string());
            sections.entry(name.trim().to_string()).or_default();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config error at line {line_no}: expected `key = value`, got {line:?}");
        };
        let Some(section) = current.clone() else {
            bail!("config error at line {line_no}: `{}` appears before any [section]", key.trim());
        };
        let prior = sections
            .entry(section)
            .or_default()
            .insert(key.trim().to_string(), (value.trim().to_string(), line_no));
        if let Some((_, old_line)) = prior {
            bail!(
                "config error at line {line_no}: duplicate key {:?} (first set at line {old_line})",
                key.trim()
            );
        }
    }
    Ok(RawConfig { sections })
}

impl RawConfig {
    fn section(&self, name: &str) -> Result<&BTreeMap<String, (String, usize)>> {
        self.sections
            .get(name)
            .with_context(|| format!("config error: missing [{name}] section"))
    }

    fn take<T: FromStr>(&self, section: &str, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let (value, line) = self
            .section(section)?
            .get(key)
            .with_context(|| format!("config error: missing `{key}` in [{section}]"))?;
        value.parse().map_err(|e| {
            anyhow::anyhow!("config error at line {line}: bad value {value:?} for `{key}`: {e}")
        })
    }

    fn take_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.sections.get(section).and_then(|s| s.get(key)) {
            None => Ok(default),
            Some(_) => self.take(section, key),
        }
    }

    fn check_known_keys(&self, section: &str, known: &[&str]) -> Result<()> {
        if let Some(keys) = self.sections.get(section) {
            for (key, (_, line)) in keys {
                if !known.contains(&key.as_str()) {
                    bail!("config error at line {line}: unknown key `{key}` in [{section}]");
                }
            }
        }
        Ok(())
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let raw = parse_raw(text)?;
    for (section, keys) in [
        (
            "model",
            &[
                "channels",
                "height",
                "width",
                "patch_size",
                "hidden_dim",
                "mlp_ratio",
                "depth",
                "classes",
            ][..],
        ),
        ("prune", &["sparsity", "block"][..]),
        (
            "train",
            &[
                "optimizer",
                "lr",
                "momentum",
                "weight_decay",
                "epochs",
                "batch_size",
            ][..],
        ),
        ("data", &["source", "samples", "path"][..]),
    ] {
        raw.check_known_keys(section, keys)?;
    }
    for name in raw.sections.keys() {
        if !["model", "prune", "train", "data"].contains(&name.as_str()) {
            bail!("config error: unknown section [{name}]");
        }
    }

    let sparsity: f64 = raw.take_or("prune", "sparsity", 0.0)?;
    let block: usize = raw.take_or("prune", "block", 1)?;
    let prune = PruneConfig::new(sparsity, block)
        .map_err(|e| anyhow::anyhow!("config error in [prune]: {e}"))?;

    let model = ModelConfig {
        channels: raw.take("model", "channels")?,
        height: raw.take("model", "height")?,
        width: raw.take("model", "width")?,
        patch_size: raw.take("model", "patch_size")?,
        hidden_dim: raw.take("model", "hidden_dim")?,
        mlp_ratio: raw.take_or("model", "mlp_ratio", 4)?,
        depth: raw.take("model", "depth")?,
        num_classes: raw.take("model", "classes")?,
        prune,
    };
    model
        .validate()
        .map_err(|e| anyhow::anyhow!("config error in [model]: {e}"))?;

    let optimizer = match raw.take_or::<String>("train", "optimizer", "sgd".into())?.as_str() {
        "sgd" => OptimizerKind::Sgd,
        "adam" => OptimizerKind::Adam,
        other => bail!("config error: unknown optimizer {other:?} (expected sgd or adam)"),
    };
    let train = TrainSettings {
        optimizer,
        lr: raw.take_or("train", "lr", 0.05)?,
        momentum: raw.take_or("train", "momentum", 0.9)?,
        weight_decay: raw.take_or("train", "weight_decay", 0.0)?,
        epochs: raw.take_or("train", "epochs", 1)?,
        batch_size: raw.take_or("train", "batch_size", 32)?,
    };

    let data = match raw.take_or::<String>("data", "source", "synthetic".into())?.as_str() {
        "synthetic" => DataSettings::Synthetic {
            samples: raw.take_or("data", "samples", 1000)?,
        },
        "cifar10" => DataSettings::Cifar10 {
            path: PathBuf::from(raw.take::<String>("data", "path")?),
        },
        other => bail!("config error: unknown data source {other:?}"),
    };

    Ok(RunConfig { model, train, data })
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    parse_run_config(&text).with_context(|| format!("in config {}", path.display()))
}

/// Comma-separated list flag (e.g. `--blocks 4,8,16`).
pub fn parse_list<T: FromStr>(text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse()
                .map_err(|e| anyhow::anyhow!("bad list element {tok:?}: {e}"))
        })
        .collect()
}
