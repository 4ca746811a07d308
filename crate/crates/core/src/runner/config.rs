//! TOML lab configuration with dotted-path overrides.
//!
//! Every section and key has a default, so an empty file is valid. Unknown
//! keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::AttackConfig;
use crate::coreset::SelectorKind;
use crate::databench::GenConfig;
use crate::error::{Error, Result};
use crate::evalsuite::EvalOptions;
use crate::model::{LMConfig, TokenId};
use crate::unlearn::{Method, TrainConfig, UnlearnConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Npo,
    Rmu,
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Npo => "npo",
            MethodKind::Rmu => "rmu",
        }
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "npo" => Ok(MethodKind::Npo),
            "rmu" => Ok(MethodKind::Rmu),
            _ => Err(Error::config(format!("unknown unlearning method `{s}` (npo, rmu)"))),
        }
    }
}

/// Architecture minus the vocabulary size, which comes from the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = LMConfig::default();
        Self { d_model: d.d_model, n_layers: d.n_layers, n_heads: d.n_heads, max_seq_len: d.max_seq_len, seed: d.seed }
    }
}

impl ModelSettings {
    pub fn lm_config(&self, vocab_size: usize) -> LMConfig {
        LMConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NpoSettings {
    pub beta: f64,
    pub lr: f64,
    pub base_epochs: f64,
    pub lambda: f64,
    pub batch_size: usize,
}

impl Default for NpoSettings {
    fn default() -> Self {
        Self { beta: 0.01, lr: 3e-3, base_epochs: 5.0, lambda: 1.0, batch_size: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmuSettings {
    pub c: f64,
    /// Defaults to the model's middle layer.
    pub layer: Option<usize>,
    pub lr: f64,
    pub base_epochs: f64,
    pub lambda: f64,
    pub batch_size: usize,
}

impl Default for RmuSettings {
    fn default() -> Self {
        Self { c: 20.0, layer: None, lr: 3e-3, base_epochs: 5.0, lambda: 1.0, batch_size: 4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnSettings {
    pub npo: NpoSettings,
    pub rmu: RmuSettings,
}

impl UnlearnSettings {
    /// Unlearning config for `method` at `ratio`; `seed` drives both the
    /// batch order and the control vector.
    pub fn config(&self, method: MethodKind, model: &LMConfig, ratio: f64, seed: u64) -> UnlearnConfig {
        let (m, lr, base, lambda, batch) = match method {
            MethodKind::Npo => {
                let s = &self.npo;
                (Method::Npo { beta: s.beta }, s.lr, s.base_epochs, s.lambda, s.batch_size)
            }
            MethodKind::Rmu => {
                let s = &self.rmu;
                let layer = s.layer.unwrap_or_else(|| model.default_rmu_layer());
                (Method::Rmu { c: s.c, layer }, s.lr, s.base_epochs, s.lambda, s.batch_size)
            }
        };
        UnlearnConfig {
            lr,
            base_epochs: base,
            lambda,
            batch_size: batch,
            ratio,
            control_seed: seed,
            order_seed: seed,
            ..UnlearnConfig::new(m)
        }
    }
}

/// Grid of the coreset-ratio sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub ratios: Vec<f64>,
    pub selectors: Vec<SelectorKind>,
    pub methods: Vec<MethodKind>,
    pub trials: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            ratios: vec![0.01, 0.05, 0.1, 1.0],
            selectors: vec![SelectorKind::Random],
            methods: vec![MethodKind::Npo, MethodKind::Rmu],
            trials: 5,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("sweep.trials must be >= 1"));
        }
        if self.ratios.is_empty() || self.selectors.is_empty() || self.methods.is_empty() {
            return Err(Error::config("sweep needs at least one ratio, selector and method"));
        }
        if let Some(r) = self.ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::config(format!("sweep ratio {r} outside (0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSettings {
    pub prefix_len: usize,
    pub iterations: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self { prefix_len: 8, iterations: 50, top_k: 16, seed: 0 }
    }
}

impl AttackSettings {
    pub fn config(&self, init_token: TokenId) -> AttackConfig {
        AttackConfig {
            prefix_len: self.prefix_len,
            iterations: self.iterations,
            top_k: self.top_k,
            seed: self.seed,
            init_token,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelearnSettings {
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl Default for RelearnSettings {
    fn default() -> Self {
        Self {
            counts: vec![0, 50, 100, 200, 400],
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                epochs: 1,
                // Small enough that fine-tuning the pre-unlearning model leaves its
                // forget and utility accuracy intact.
                lr: 1e-4,
                final_lr_frac: 1.0,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub data: GenConfig,
    pub model: ModelSettings,
    pub pretrain: TrainConfig,
    pub unlearn: UnlearnSettings,
    pub sweep: SweepSpec,
    pub eval: EvalOptions,
    pub attack: AttackSettings,
    pub relearn: RelearnSettings,
}

impl LabConfig {
    /// Parses `text` and applies `key.path=value` overrides before
    /// validation, so overrides obey the same schema as the file.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::config(format!("config parse error: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: LabConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.sweep.validate()?;
        self.model.lm_config(1).validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) =
        spec.split_once('=').ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("nonempty");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur =
            entry.as_table_mut().ok_or_else(|| Error::config(format!("override `{spec}`: `{k}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
