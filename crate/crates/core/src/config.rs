//! Experiment configuration: JSON schema, `key=value` overrides and digest.
//!
//! ```json
//! {
//!   "sequence": { "k": 5, "d": 16, "n_per_domain": 500, ... },
//!   "model":    { "d": 16, "hidden": [64, 64], "feat_dim": 32, "k": 5 },
//!   "adapt":    { "epochs": 60, "lr": 0.01, ... },
//!   "dg":       { "epochs": 60, "alpha": 1.0, "selnlpl": true, ... },
//!   "aug":      { "n_transforms": 4, ... },
//!   "buffer":   { "capacity": 200 },
//!   "run":      { "seeds": [2022, 2023, 2024], "variant": "codag", ... }
//! }
//! ```
//!
//! Every section and field is optional and falls back to its default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adapt::AdaptConfig;
use crate::augment::AugmentConfig;
use crate::data::SequenceConfig;
use crate::error::{invalid, io_err, CodagError, Result};
use crate::generalize::DGConfig;
use crate::nnmodel::ModelConfig;

pub const DEFAULT_SEEDS: [u64; 3] = [2022, 2023, 2024];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Codag,
    DaOnly,
    DgOnly,
    CodagNoBuffer,
    CodagNoSelnlpl,
    CodagDaInit,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Codag => "codag",
            Variant::DaOnly => "da-only",
            Variant::DgOnly => "dg-only",
            Variant::CodagNoBuffer => "codag-no-buffer",
            Variant::CodagNoSelnlpl => "codag-no-selnlpl",
            Variant::CodagDaInit => "codag-da-init",
        }
    }

    /// Variants that train a single model evaluated for every metric.
    pub fn single_model(self) -> bool {
        matches!(self, Variant::DaOnly | Variant::DgOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BufferConfig {
    pub capacity: usize,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self { capacity: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub variant: Variant,
    /// Order in which target domains `1..=T` are visited; `None` is
    /// ascending.
    pub domain_order: Option<Vec<usize>>,
    /// Fraction of pseudo-labels replaced by a random wrong class before DG
    /// training (label-noise ablation).
    pub pseudo_label_noise: f64,
    /// Evaluate every domain after every DG epoch.
    pub log_curves: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: DEFAULT_SEEDS.to_vec(),
            variant: Variant::Codag,
            domain_order: None,
            pseudo_label_noise: 0.0,
            log_curves: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub sequence: SequenceConfig,
    pub model: ModelConfig,
    pub adapt: AdaptConfig,
    pub dg: DGConfig,
    pub aug: AugmentConfig,
    pub buffer: BufferConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(io_err(format!("reading config {}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| CodagError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let cfg: Self = serde_json::from_value(value).map_err(|e| CodagError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sequence.validate()?;
        self.model.validate()?;
        self.adapt.validate()?;
        self.dg.validate()?;
        self.aug.validate()?;
        if self.model.d != self.sequence.d || self.model.k != self.sequence.k {
            return Err(invalid(format!(
                "model (d={}, k={}) does not match sequence (d={}, k={})",
                self.model.d, self.model.k, self.sequence.d, self.sequence.k
            )));
        }
        if self.run.seeds.is_empty() {
            return Err(invalid("run.seeds must be nonempty"));
        }
        if !(0.0..=1.0).contains(&self.run.pseudo_label_noise) {
            return Err(invalid("run.pseudo_label_noise must lie in [0, 1]"));
        }
        self.stage_order()?;
        Ok(())
    }

    /// Domain index visited at each stage: `0` followed by the target order.
    pub fn stage_order(&self) -> Result<Vec<usize>> {
        let t = self.sequence.domains.len().saturating_sub(1);
        let targets = match &self.run.domain_order {
            None => (1..=t).collect(),
            Some(order) => {
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted != (1..=t).collect::<Vec<_>>() {
                    return Err(invalid(format!(
                        "run.domain_order must be a permutation of 1..={t}, got {order:?}"
                    )));
                }
                order.clone()
            }
        };
        Ok(std::iter::once(0).chain(targets).collect())
    }

    /// Applies `section.field=value` overrides. Values parse as JSON and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, val) = raw
                .split_once('=')
                .ok_or_else(|| invalid(format!("override {raw:?} is not key=value")))?;
            let parsed: Value =
                serde_json::from_str(val).unwrap_or_else(|_| Value::String(val.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) => map
                        .get_mut(part)
                        .ok_or_else(|| invalid(format!("unknown config key {key:?}")))?,
                    Value::Array(items) => {
                        let idx: usize = part
                            .parse()
                            .map_err(|_| invalid(format!("unknown config key {key:?}")))?;
                        items
                            .get_mut(idx)
                            .ok_or_else(|| invalid(format!("index out of range in {key:?}")))?
                    }
                    _ => return Err(invalid(format!("unknown config key {key:?}"))),
                };
            }
            *slot = parsed;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
