//! Run configuration: JSON file first, command-line flags on top.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use textrl::evalkit::FinetuneConfig;

/// Everything a finetune, evaluate or experiment run needs besides the
/// subcommand itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// `paper` starts from the published settings, `desk` from the
    /// single-core scale.
    pub profile: String,
    pub env: String,
    /// Used only when no dataset file is given and one is generated.
    pub tier: String,
    pub episodes: usize,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: "paper".into(),
            env: "pointmass".into(),
            tier: "medium-expert".into(),
            episodes: 100,
            dataset: None,
            checkpoint: None,
            corpus: None,
            seeds: vec![0],
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults for `profile`, overlaid with the JSON object at `path`.
    pub fn load(path: Option<&Path>, profile: Option<&str>) -> anyhow::Result<Self> {
        let raw: serde_json::Value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("{}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", p.display()))?
            }
            None => serde_json::json!({}),
        };
        let profile = profile
            .map(str::to_string)
            .or_else(|| raw.get("profile").and_then(|v| v.as_str()).map(str::to_string))
            .unwrap_or_else(|| "paper".into());
        let base_ft = match profile.as_str() {
            "paper" => FinetuneConfig::default(),
            "desk" => FinetuneConfig::desk(),
            other => anyhow::bail!("unknown profile `{other}`"),
        };
        let mut base = serde_json::to_value(RunConfig {
            profile,
            finetune: base_ft,
            ..Default::default()
        })?;
        merge(&mut base, raw);
        serde_json::from_value(base).context("config does not match the expected schema")
    }
}

/// Recursive object merge; values in `top` win.
pub fn merge(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
