//! Run configuration: one TOML section per stage plus paths and a seed.
//! Values come from the defaults, then an optional config file, then
//! `--set section.key=value` overrides, then explicit path flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajfm::atr::ResamplePolicy;
use trajfm::model::ModelConfig;
use trajfm::preprocess::FilterPolicy;
use trajfm::stm::MaskSpec;
use trajfm::synth::SynthSpec;

use crate::failure::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every stage: synthesis, model init, batching and masking.
    pub seed: u64,
    pub paths: Paths,
    pub filter: FilterPolicy,
    pub resample: ResamplePolicy,
    pub mask: MaskSpec,
    pub model: ModelConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            filter: FilterPolicy::default(),
            resample: ResamplePolicy::default(),
            mask: MaskSpec::default(),
            model: ModelConfig::desk(),
            synth: SynthSpec::default(),
        }
    }
}

/// Keys whose value is taken from the top-level `seed`.
const DERIVED_KEYS: [&str; 2] = ["model.seed", "synth.seed"];

/// Keys with no default; absent from the serialized defaults.
const OPTIONAL_KEYS: [&str; 4] = ["paths.checkpoint", "paths.input", "paths.output", "resample.interval_dt"];

impl RunConfig {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut doc = toml::Table::try_from(RunConfig::default()).map_err(|e| Failure::config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::io(format!("reading config {}: {e}", path.display())))?;
            let user: toml::Table =
                text.parse().map_err(|e| Failure::config(format!("parsing {}: {e}", path.display())))?;
            merge(&mut doc, user);
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Failure::config(format!("override `{item}` is not key=value")))?;
            set_key(&mut doc, key.trim(), parse_value(raw.trim()))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Failure::config(e.message().to_string()))?;
        cfg.model.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.filter.validate().map_err(|e| Failure::config(e.to_string()))?;
        self.resample.validate().map_err(|e| Failure::config(e.to_string()))?;
        self.mask.validate().map_err(|e| Failure::config(e.to_string()))?;
        self.model.validate().map_err(|e| Failure::config(e.to_string()))?;
        self.synth.validate().map_err(|e| Failure::config(e.to_string()))?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn require_input(&self) -> Result<&Path, Failure> {
        let p = self.paths.input.as_deref().ok_or_else(|| Failure::config("paths.input is not set"))?;
        if !p.exists() {
            return Err(Failure::io(format!("input {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn require_output(&self) -> Result<&Path, Failure> {
        self.paths.output.as_deref().ok_or_else(|| Failure::config("paths.output is not set"))
    }

    pub fn require_checkpoint(&self) -> Result<&Path, Failure> {
        self.paths.checkpoint.as_deref().ok_or_else(|| Failure::config("paths.checkpoint is not set"))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_key(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), Failure> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for s in sections {
        table = match table.get_mut(*s) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Failure::config(format!("unknown config section in `{key}`"))),
        };
    }
    if !table.contains_key(*last) && !OPTIONAL_KEYS.contains(&key) {
        return Err(Failure::config(format!("unknown config key `{key}`")));
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Every configurable key with its default, one per line.
pub fn keys_help() -> String {
    let doc = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    let mut lines = Vec::new();
    flatten("", &toml::Value::Table(doc), &mut lines);
    lines.extend(OPTIONAL_KEYS.iter().map(|k| (k.to_string(), "(unset)".to_string())));
    lines.sort();
    lines.retain(|(k, _)| !DERIVED_KEYS.contains(&k.as_str()));
    let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (set in --config FILE or with --set key=value):\n");
    for (k, v) in lines {
        out.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    out
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::load(
            None,
            &[
                "model.d_model=16".into(),
                "seed=9".into(),
                "paths.input=a.jsonl".into(),
                "mask.mask_ratio=0.3".into(),
                "resample.interval_dt=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.resample.interval_dt, Some(3));
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.model.seed, 9);
        assert_eq!(cfg.synth.seed, 9);
        assert_eq!(cfg.mask.ratio, 0.3);
        assert_eq!(cfg.paths.input.as_deref(), Some(Path::new("a.jsonl")));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load(None, &["model.width=3".into()]).is_err());
        assert!(RunConfig::load(None, &["nosuch.key=3".into()]).is_err());
        assert!(RunConfig::load(None, &["model.d_model".into()]).is_err());
    }

    #[test]
    fn help_lists_keys() {
        let h = keys_help();
        for key in ["filter.min_points", "resample.n_max", "mask.w_key", "model.lr", "synth.noise_sigma_m", "paths.input", "resample.interval_dt", "seed"] {
            assert!(h.contains(key), "{key} missing");
        }
        assert!(!h.contains("model.seed"));
    }
}
