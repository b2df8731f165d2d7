//! Experiment configuration: JSON file, dotted overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{PartitionKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::federation::{LocalTraining, PretrainOptions, StrategyConfig, StrategySection, TrainingConfig};
use crate::lora::Architecture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Numeric feature columns plus `label` and optional `group`.
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DataSource,
    pub subsample_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SyntheticSpec::default()),
            subsample_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub kind: PartitionKind,
    pub clients: usize,
    /// Dirichlet concentration; defaults to 0.1, not accepted for `natural`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub min_per_client: usize,
    pub max_retries: usize,
}

pub const DEFAULT_ALPHA: f64 = 0.1;

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            kind: PartitionKind::Dirichlet,
            clients: 20,
            alpha: None,
            min_per_client: 5,
            max_retries: 10,
        }
    }
}

impl PartitionSection {
    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(DEFAULT_ALPHA)
    }
}

/// `"all"`, `"first-half"`, `"second-half"` or an explicit 0/1 list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PsiSpec {
    Preset(String),
    Mask(Vec<u8>),
}

impl Default for PsiSpec {
    fn default() -> Self {
        PsiSpec::Preset("all".into())
    }
}

impl PsiSpec {
    pub fn resolve(&self, layers: usize) -> Result<Vec<bool>> {
        let field = "model.psi";
        let first = (layers / 2).max(1);
        let mask: Vec<bool> = match self {
            PsiSpec::Preset(p) => match p.as_str() {
                "all" => vec![true; layers],
                "first-half" => (0..layers).map(|l| l < first).collect(),
                "second-half" => {
                    if layers < 2 {
                        return Err(Error::config(field, "second-half needs at least two layers"));
                    }
                    (0..layers).map(|l| l >= first).collect()
                }
                other => {
                    return Err(Error::config(
                        field,
                        format!("unknown preset `{other}` (all, first-half, second-half, or a 0/1 list)"),
                    ))
                }
            },
            PsiSpec::Mask(m) => {
                if m.len() != layers {
                    return Err(Error::config(
                        field,
                        format!("{} entries for {layers} LoRA layers", m.len()),
                    ));
                }
                if let Some(bad) = m.iter().find(|&&v| v > 1) {
                    return Err(Error::config(field, format!("entry {bad} is not 0 or 1")));
                }
                m.iter().map(|&v| v == 1).collect()
            }
        };
        if !mask.iter().any(|&b| b) {
            return Err(Error::config(field, "at least one layer must be selected"));
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Widths of the LoRA layers after the input; the input width comes from the data.
    pub hidden: Vec<usize>,
    pub rank: usize,
    pub psi: PsiSpec,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    /// Checkpoint whose frozen weights replace pretraining.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_checkpoint: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            rank: 8,
            psi: PsiSpec::default(),
            pretrain_epochs: 3,
            pretrain_lr: 0.05,
            pretrain_batch_size: 32,
            base_checkpoint: None,
        }
    }
}

impl ModelSection {
    pub fn architecture(&self, input_dim: usize, classes: usize) -> Architecture {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(&self.hidden);
        Architecture {
            widths,
            classes,
            rank: self.rank,
        }
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub parallel: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            rounds: 200,
            local_epochs: 1,
            lr: 0.05,
            batch_size: 16,
            parallel: true,
        }
    }
}

impl TrainingSection {
    pub fn to_training(&self) -> TrainingConfig {
        TrainingConfig {
            rounds: self.rounds,
            local: LocalTraining {
                lr: self.lr,
                local_epochs: self.local_epochs,
                batch_size: self.batch_size,
            },
            parallel: self.parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub strategy: StrategySection,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            partition: PartitionSection::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            strategy: StrategySection::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("{v} must be a finite number > 0")))
    }
}

fn at_least_one(field: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::config(field, "must be ≥ 1"))
    }
}

impl ExperimentConfig {
    /// Every check that does not need the data itself.
    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(spec) = &self.dataset.source {
            spec.validate()?;
        }
        let f = self.dataset.subsample_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config("dataset.subsample_fraction", format!("{f} must lie in (0, 1]")));
        }

        at_least_one("partition.clients", self.partition.clients)?;
        match (self.partition.kind, self.partition.alpha) {
            (PartitionKind::Natural, Some(_)) => {
                return Err(Error::config("partition.alpha", "only used by the dirichlet partition"))
            }
            (PartitionKind::Dirichlet, Some(a)) => positive("partition.alpha", a)?,
            _ => {}
        }

        let m = &self.model;
        if m.hidden.is_empty() {
            return Err(Error::config("model.hidden", "need at least one LoRA layer"));
        }
        at_least_one("model.rank", m.rank)?;
        if let Some(w) = m.hidden.iter().find(|&&w| w < m.rank) {
            return Err(Error::config(
                "model.rank",
                format!("rank {} exceeds hidden width {w}", m.rank),
            ));
        }
        m.psi.resolve(m.hidden.len())?;
        if m.pretrain_epochs > 0 {
            positive("model.pretrain_lr", m.pretrain_lr)?;
            at_least_one("model.pretrain_batch_size", m.pretrain_batch_size)?;
        }

        let t = &self.training;
        at_least_one("training.local_epochs", t.local_epochs)?;
        at_least_one("training.batch_size", t.batch_size)?;
        positive("training.lr", t.lr)?;

        self.strategy.resolve()?;
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::config("out_dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn strategy_config(&self) -> Result<StrategyConfig> {
        self.strategy.resolve()
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Sets `value` at a dotted path, creating objects on the way.
pub fn set_path(doc: &mut Value, dotted: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(dotted, "malformed override path"));
    }
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(Error::config(
                parts[..i].join("."),
                "is not an object and cannot take nested overrides",
            ));
        }
        let obj = cur.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

/// JSON merge patch: objects merge recursively, `null` deletes, anything else replaces.
pub fn merge_patch(target: &mut Value, patch: &Value) {
    match patch {
        Value::Object(p) => {
            if !target.is_object() {
                *target = Value::Object(Default::default());
            }
            let t = target.as_object_mut().unwrap();
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        other => *target = other.clone(),
    }
}

/// Parses `key=value` where value is JSON, falling back to a bare string.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::config(arg, "override must look like key.path=value"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Builds a validated config from a JSON document after applying overrides in order.
pub fn config_from_value(mut doc: Value, overrides: &[(String, Value)]) -> Result<ExperimentConfig> {
    if !doc.is_object() {
        return Err(Error::config("config", "top level must be a JSON object"));
    }
    for (k, v) in overrides {
        set_path(&mut doc, k, v.clone())?;
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "config".into() } else { path }, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

/// Reads the file when given (else `{}`), applies overrides, validates.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<ExperimentConfig> {
    let doc = match path {
        Some(p) => read_json(p)?,
        None => Value::Object(Default::default()),
    };
    config_from_value(doc, overrides)
}
