//! The run configuration document and its override layers.

use std::fmt;
use std::path::{Path, PathBuf};

use csmf::data::GeneratorConfig;
use csmf::eval::EvalSpec;
use csmf::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

/// A configuration problem; the process exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Holds train.jsonl, test.jsonl and summary.json.
    pub data: PathBuf,
    /// Checkpoints, reports and metrics of `train`.
    pub run: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data: "data".into(), run: "run".into() }
    }
}

impl Paths {
    pub fn train_file(&self) -> PathBuf {
        self.data.join("train.jsonl")
    }

    pub fn test_file(&self) -> PathBuf {
        self.data.join("test.jsonl")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.run.join("final.ckpt")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds both the generator and the pipeline; the nested seed keys
    /// follow it.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig::default();
        let generator = GeneratorConfig { seed: pipeline.seed, ..Default::default() };
        Self { seed: pipeline.seed, generator, pipeline, eval: EvalSpec::default(), paths: Paths::default() }
    }
}

impl RunConfig {
    /// Defaults, then the file, then `CSMF_SEED`, then `--set` overrides.
    pub fn load(file: Option<&Path>, env_seed: Option<&str>, sets: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
                let cfg: RunConfig = toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
                if cfg.generator.seed != cfg.seed || cfg.pipeline.seed != cfg.seed {
                    log::warn!("nested seeds are replaced by the top-level seed {}", cfg.seed);
                }
                cfg
            }
            None => RunConfig::default(),
        };
        if let Some(s) = env_seed {
            cfg.seed = s.trim().parse().map_err(|_| bad(format!("CSMF_SEED must be an unsigned integer, got {s:?}")))?;
        }
        if !sets.is_empty() {
            let mut tree = toml::Value::try_from(&cfg).map_err(|e| bad(e.to_string()))?;
            for kv in sets {
                apply_set(&mut tree, kv)?;
            }
            cfg = tree.try_into().map_err(|e: toml::de::Error| bad(format!("after --set: {e}")))?;
        }
        cfg.generator.seed = cfg.seed;
        cfg.pipeline.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |r: csmf::Result<()>| r.map_err(|e| bad(e.to_string()));
        check(self.generator.validate())?;
        check(self.pipeline.validate())?;
        check(self.eval.validate())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `a.b.c=value` in a TOML tree. The key must already exist, so typos
/// fail instead of being ignored.
fn apply_set(tree: &mut toml::Value, kv: &str) -> Result<(), ConfigError> {
    let (key, raw) = kv.split_once('=').ok_or_else(|| bad(format!("--set expects KEY=VALUE, got {kv:?}")))?;
    let mut node = tree;
    for part in key.trim().split('.') {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(part))
            .ok_or_else(|| bad(format!("unknown config key {key:?}")))?;
    }
    let mut value = parse_value(raw.trim());
    if let (toml::Value::Float(_), toml::Value::Integer(i)) = (&*node, &value) {
        value = toml::Value::Float(*i as f64);
    }
    *node = value;
    Ok(())
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use csmf::pipeline::Mode;

    #[test]
    fn printed_defaults_parse_back() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn set_overrides_nested_keys() {
        let sets = vec!["pipeline.tau=0.5".into(), "pipeline.mode=mixed_single".into(), "eval.weights.k_o=2".into()];
        let cfg = RunConfig::load(None, None, &sets).unwrap();
        assert_eq!(cfg.pipeline.tau, 0.5);
        assert_eq!(cfg.pipeline.mode, Mode::MixedSingle);
        assert_eq!(cfg.eval.weights.k_o, 2.0);
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(RunConfig::load(None, None, &["pipeline.tua=0.5".into()]).is_err());
        assert!(RunConfig::load(None, None, &["tau".into()]).is_err());
    }

    #[test]
    fn seed_layers_apply_in_order() {
        let cfg = RunConfig::load(None, Some("11"), &[]).unwrap();
        assert_eq!((cfg.seed, cfg.generator.seed, cfg.pipeline.seed), (11, 11, 11));
        let cfg = RunConfig::load(None, Some("11"), &["seed=5".into()]).unwrap();
        assert_eq!(cfg.pipeline.seed, 5);
        assert!(RunConfig::load(None, Some("x"), &[]).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::load(None, None, &["pipeline.tau=1.5".into()]).is_err());
        assert!(RunConfig::load(None, None, &["generator.click_rate=0.01".into()]).is_err());
    }
}
