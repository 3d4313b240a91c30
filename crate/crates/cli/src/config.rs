//! Flat `key=value` run configuration.
//!
//! Keys are dotted paths into [`RunConfig`] (`model.model_dim`,
//! `pretrain.lr_peak`, `masking.dm_tgt_range_bilingual.0`, ...). Blank lines
//! and lines starting with `#` are ignored.
//!
//! Precedence, lowest first: preset, `--config` file, `--set` flags in
//! order, dedicated flags such as `--seed`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cemat::eval::ExperimentConfig;
use cemat::training::Regime;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub regime: Regime,
    /// Save a checkpoint every this many updates; 0 saves only the last.
    pub checkpoint_every: u64,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let experiment = match name {
            "toy" => ExperimentConfig::toy(),
            "base" => ExperimentConfig {
                model: Default::default(),
                vocab_size: cemat::vocab::DEFAULT_VOCAB_SIZE,
                vocab_sample: 100_000,
                pretrain: Default::default(),
                finetune: Default::default(),
                finetune_nat: Default::default(),
                decode: Default::default(),
                ..ExperimentConfig::toy()
            },
            other => bail!(UsageError(format!("unknown preset {other:?} (toy, base)"))),
        };
        Ok(RunConfig { seed: 1, regime: Regime::Both, checkpoint_every: 0, experiment })
    }

    /// Every key with its current value, sorted by key.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out.sort();
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies `key=value` assignments in order.
    pub fn apply<'a>(&self, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        for (k, v) in assignments {
            set(&mut value, k, v)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| UsageError(format!("invalid configuration: {e}")))?;
        // vocab_size is filled in from the vocabulary file later
        let model = cemat::model::ModelConfig {
            vocab_size: cfg.experiment.model.vocab_size.max(1),
            ..cfg.experiment.model.clone()
        };
        model.validate().map_err(|e| UsageError(e.to_string()))?;
        cfg.experiment.masking.validate().map_err(|e| UsageError(e.to_string()))?;
        for t in [&cfg.experiment.pretrain, &cfg.experiment.finetune, &cfg.experiment.finetune_nat] {
            t.validate().map_err(|e| UsageError(e.to_string()))?;
        }
        cfg.experiment.decode.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn apply_text(&self, text: &str, origin: &str) -> Result<Self> {
        let pairs = parse_lines(text, origin)?;
        self.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn apply_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }
}

pub fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(UsageError(format!("{origin}:{}: expected key=value", i + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => bail!(UsageError(format!("--set expects key=value, got {s:?}"))),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => map.iter().for_each(|(k, v)| flatten(&key(k), v, out)),
        Value::Array(items) => items.iter().enumerate().for_each(|(i, v)| flatten(&key(&i.to_string()), v, out)),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn set(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let unknown = || UsageError(format!("unknown configuration key {key:?}"));
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part).ok_or_else(unknown)?,
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)).ok_or_else(unknown)?,
            _ => bail!(unknown()),
        };
    }
    let bad = || UsageError(format!("{key}: cannot parse {raw:?}"));
    *cur = match cur {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_f64() => serde_json::json!(raw.parse::<f64>().map_err(|_| bad())?),
        Value::Number(_) => match raw.parse::<u64>() {
            Ok(u) => serde_json::json!(u),
            Err(_) => serde_json::json!(raw.parse::<f64>().map_err(|_| bad())?),
        },
        Value::String(_) => Value::String(raw.to_string()),
        _ => bail!(unknown()),
    };
    Ok(())
}
