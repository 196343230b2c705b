//! Experiment configuration and its flat `key = value` file format.
//!
//! Keys are the dotted field paths of [`ExperimentConfig`], for example
//! `seed`, `search.c_puct`, `svpo.gamma`, `sbs.b1` or `ablation.no_mse`.
//! Blank lines and lines starting with `#` are ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{Difficulty, Env};
use crate::error::{Error, Result};
use crate::infer::SBSConfig;
use crate::mcts::SearchConfig;
use crate::pairs::PairCounts;
use crate::policyval::DEFAULT_HIDDEN;
use crate::train::{Stage, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_margin: bool,
    pub no_mse: bool,
    pub no_reg: bool,
    pub solution_level_only: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        no_margin: false,
        no_mse: false,
        no_reg: false,
        solution_level_only: false,
    };

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.no_margin {
            parts.push("no_margin");
        }
        if self.no_mse {
            parts.push("no_mse");
        }
        if self.no_reg {
            parts.push("no_reg");
        }
        if self.solution_level_only {
            parts.push("solution_level");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }

    /// Zeroes the loss weights switched off by the flags. `no_mse` removes
    /// the value regression from both stages.
    pub fn apply(&self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        if self.no_margin {
            c.w_margin = 0.0;
        }
        if self.no_mse {
            c.w_mse = 0.0;
            c.w_mse_pretrain = 0.0;
        }
        if self.no_reg {
            c.w_reg = 0.0;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Drives search, initialization, shuffling and sampling.
    pub seed: u64,
    /// Drives question generation only, so several seeds can share a corpus.
    pub data_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub difficulty: Difficulty,
    pub hidden: usize,
    pub init_scale: f64,
    /// Correct solutions kept per question for supervised pretraining.
    pub sft_per_question: usize,
    pub search: SearchConfig,
    pub counts: PairCounts,
    pub pretrain: TrainConfig,
    pub svpo: TrainConfig,
    pub sbs: SBSConfig,
    pub ablation: Ablation,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data_seed: 7,
            n_train: 500,
            n_test: 200,
            difficulty: Difficulty::Medium,
            hidden: DEFAULT_HIDDEN,
            init_scale: 0.3,
            sft_per_question: 4,
            search: SearchConfig::default(),
            counts: PairCounts::default(),
            pretrain: TrainConfig::pretrain(),
            svpo: TrainConfig::default(),
            sbs: SBSConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn env(&self) -> Env {
        self.search.env()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        if self.pretrain.stage != Stage::Pretrain || self.svpo.stage != Stage::Svpo {
            return Err(Error::Config("pretrain.stage and svpo.stage are fixed".into()));
        }
        if self.sbs.max_depth != self.search.max_depth {
            return Err(Error::Config("sbs.max_depth must equal search.max_depth".into()));
        }
        self.search.validate()?;
        self.pretrain.validate()?;
        self.svpo.validate()?;
        self.sbs.validate()
    }

    /// Preference-stage config after ablation flags.
    pub fn svpo_effective(&self) -> TrainConfig {
        self.ablation.apply(&self.svpo)
    }

    pub fn pretrain_effective(&self) -> TrainConfig {
        self.ablation.apply(&self.pretrain)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let slot = key
            .split('.')
            .try_fold(&mut tree, |v, part| v.get_mut(part))
            .filter(|v| !v.is_object())
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        *slot = coerce(slot, value).ok_or_else(|| Error::Config(format!("bad value for {key}: {value:?}")))?;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_flat(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        flatten("", &tree, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
        other => out.push_str(&format!("{prefix} = {other}\n")),
    }
}

fn coerce(current: &Value, raw: &str) -> Option<Value> {
    match current {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(n) if n.is_i64() => raw.parse::<i64>().ok().map(Value::from),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number),
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Array(_) | Value::Object(_) | Value::Null => None,
    }
}
