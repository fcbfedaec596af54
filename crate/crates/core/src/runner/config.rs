use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{OptimizerHyper, OptimizerKind, Schedule};
use crate::error::{config_err, Error, Result};
use crate::metrics::PscpConstants;
use crate::model::ModelSpec;

/// `model:` is either the name `reference` or an inline spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Named(String),
    Inline(ModelSpec),
}

impl ModelChoice {
    pub fn resolve(&self) -> Result<ModelSpec> {
        let spec = match self {
            ModelChoice::Named(n) if n == "reference" => ModelSpec::reference(),
            ModelChoice::Named(n) => return Err(config_err(format!("unknown model '{n}'; use 'reference' or an inline spec"))),
            ModelChoice::Inline(s) => s.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn raw_hyperparameters<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<String, String>, D::Error> {
    fn text(v: &serde_yaml::Value) -> Option<String> {
        use serde_yaml::Value;
        match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            Value::Bool(b) => Some(b.to_string()),
            Value::Sequence(items) => items.iter().map(text).collect::<Option<Vec<_>>>().map(|v| v.join(",")),
            _ => None,
        }
    }
    let map = BTreeMap::<String, serde_yaml::Value>::deserialize(d)?;
    map.into_iter()
        .map(|(k, v)| match text(&v) {
            Some(t) => Ok((k, t)),
            None => Err(serde::de::Error::custom(format!("hyperparameter '{k}' must be a scalar or a list"))),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub peft_type: String,
    #[serde(default, deserialize_with = "raw_hyperparameters")]
    pub hyperparameters: BTreeMap<String, String>,
}

fn default_train_split() -> String {
    "train".into()
}

fn default_eval_splits() -> Vec<String> {
    vec!["test".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    #[serde(default = "default_train_split")]
    pub train_split: String,
    #[serde(default = "default_eval_splits")]
    pub eval_splits: Vec<String>,
}

fn default_batch_size() -> usize {
    8
}

fn default_lr() -> f64 {
    5e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub warmup_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn optimizer_hyper(&self) -> OptimizerHyper {
        OptimizerHyper {
            kind: self.optimizer,
            weight_decay: self.weight_decay,
            ..OptimizerHyper::default()
        }
    }
}

fn default_max_new_tokens() -> usize {
    8
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "yes")]
    pub compute_classification_metrics: bool,
    #[serde(default)]
    pub compute_pscp: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pscp_cp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pscp_cf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pscp_cm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pscp_bp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pscp_bf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pscp_bm: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: default_max_new_tokens(),
            compute_classification_metrics: true,
            compute_pscp: false,
            pscp_cp: None,
            pscp_cf: None,
            pscp_cm: None,
            pscp_bp: None,
            pscp_bf: None,
            pscp_bm: None,
        }
    }
}

impl EvalConfig {
    pub fn pscp_constants(&self) -> PscpConstants {
        let d = PscpConstants::default();
        PscpConstants {
            c_p: self.pscp_cp.unwrap_or(d.c_p),
            c_f: self.pscp_cf.unwrap_or(d.c_f),
            c_m: self.pscp_cm.unwrap_or(d.c_m),
            b_p: self.pscp_bp.unwrap_or(d.b_p),
            b_f: self.pscp_bf.unwrap_or(d.b_f),
            b_m: self.pscp_bm.unwrap_or(d.b_m),
        }
    }

    /// The switches and constants that must agree across a benchmark.
    pub fn flags(&self) -> (bool, bool, PscpConstants) {
        (self.compute_classification_metrics, self.compute_pscp, self.pscp_constants())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelChoice,
    pub method: MethodConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        let cfg: Self = serde_yaml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml(&text).map_err(|e| match e {
            Error::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks that need no registry lookups.
    pub fn validate(&self) -> Result<()> {
        self.model.resolve()?;
        let t = &self.train;
        match (t.steps, t.epochs) {
            (Some(0), _) | (_, Some(0)) => return Err(config_err("train.steps / train.epochs must be positive")),
            (Some(_), Some(_)) => return Err(config_err("set exactly one of train.steps and train.epochs, not both")),
            (None, None) => return Err(config_err("set exactly one of train.steps and train.epochs")),
            _ => {}
        }
        if t.batch_size == 0 {
            return Err(config_err("train.batch_size must be positive"));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(config_err(format!("train.lr must be positive, got {}", t.lr)));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return Err(config_err(format!("train.weight_decay must be nonnegative, got {}", t.weight_decay)));
        }
        if self.dataset.eval_splits.is_empty() {
            return Err(config_err("dataset.eval_splits is empty"));
        }
        self.eval.pscp_constants().validate()
    }

    /// SHA-256 of the canonical (key-sorted) JSON form.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}
