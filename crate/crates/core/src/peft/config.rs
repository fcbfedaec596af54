use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::manifest::{Constraint, HyperKind, MethodManifest};
use super::registry::MethodRegistry;
use crate::error::{config_err, Result};

/// A typed hyperparameter value.
#[derive(Clone, Debug, PartialEq)]
pub enum HyperValue {
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<String>),
}

impl HyperValue {
    /// Parses the textual form of a value of the given kind.
    pub fn parse(kind: HyperKind, raw: &str) -> std::result::Result<Self, String> {
        let raw = raw.trim();
        match kind {
            HyperKind::Int => raw
                .parse::<i64>()
                .map(HyperValue::Int)
                .map_err(|_| format!("'{raw}' is not an integer")),
            HyperKind::Float => match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(HyperValue::Float(v)),
                _ => Err(format!("'{raw}' is not a finite number")),
            },
            HyperKind::String => Ok(HyperValue::Str(raw.to_string())),
            HyperKind::StringList | HyperKind::Pattern => {
                let items: Vec<String> = raw
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect();
                if kind == HyperKind::Pattern {
                    if let Some(bad) = items.iter().find(|s| s.contains(char::is_whitespace)) {
                        return Err(format!("pattern '{bad}' contains whitespace"));
                    }
                }
                Ok(HyperValue::List(items))
            }
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            HyperValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            HyperValue::Float(v) => Some(*v),
            HyperValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            HyperValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[String]> {
        match self {
            HyperValue::List(v) => Some(v),
            _ => None,
        }
    }

    pub fn matches_kind(&self, kind: HyperKind) -> bool {
        matches!(
            (self, kind),
            (HyperValue::Int(_), HyperKind::Int)
                | (HyperValue::Float(_), HyperKind::Float)
                | (HyperValue::Str(_), HyperKind::String)
                | (HyperValue::List(_), HyperKind::StringList | HyperKind::Pattern)
        )
    }
}

/// Textual form accepted back by [`HyperValue::parse`].
impl fmt::Display for HyperValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HyperValue::Int(v) => write!(f, "{v}"),
            HyperValue::Float(v) => write!(f, "{v:?}"),
            HyperValue::Str(s) => f.write_str(s),
            HyperValue::List(items) => f.write_str(&items.join(",")),
        }
    }
}

impl Serialize for HyperValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            HyperValue::Int(v) => s.serialize_i64(*v),
            HyperValue::Float(v) => s.serialize_f64(*v),
            HyperValue::Str(v) => s.serialize_str(v),
            HyperValue::List(v) => v.serialize(s),
        }
    }
}

/// A resolved hyperparameter set: every schema key present, in schema order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TunerConfig {
    pub peft_type: String,
    pub values: IndexMap<String, HyperValue>,
}

/// Raw key/value form stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTunerConfig {
    pub peft_type: String,
    pub values: BTreeMap<String, String>,
}

impl TunerConfig {
    pub fn get(&self, name: &str) -> Option<&HyperValue> {
        self.values.get(name)
    }

    pub fn to_raw(&self) -> RawTunerConfig {
        RawTunerConfig {
            peft_type: self.peft_type.clone(),
            values: self
                .values
                .iter()
                .map(|(k, v)| (k.clone(), v.to_string()))
                .collect(),
        }
    }
}

/// Resolves `raw` against the method's schema: user keys are type- and
/// constraint-checked, omitted keys take manifest defaults.
pub fn parse_config(
    registry: &MethodRegistry,
    peft_type: &str,
    raw: &BTreeMap<String, String>,
) -> Result<TunerConfig> {
    let manifest = registry.get(peft_type)?;
    resolve(manifest, raw)
}

pub(crate) fn resolve(manifest: &MethodManifest, raw: &BTreeMap<String, String>) -> Result<TunerConfig> {
    for key in raw.keys() {
        if manifest.hyperparameter(key).is_none() {
            let valid: Vec<&str> = manifest.hyperparameters.iter().map(|h| h.name.as_str()).collect();
            return Err(config_err(format!(
                "unknown hyperparameter '{key}' for method '{}'; valid keys: [{}]",
                manifest.peft_type,
                valid.join(", ")
            )));
        }
    }
    let mut values = IndexMap::new();
    for hp in &manifest.hyperparameters {
        let value = match raw.get(&hp.name) {
            Some(text) => HyperValue::parse(hp.kind, text).map_err(|e| {
                config_err(format!("{}.{}: {e}", manifest.peft_type, hp.name))
            })?,
            None => hp.default.clone(),
        };
        check_constraints(&hp.constraints, &value)
            .map_err(|e| config_err(format!("{}.{}: {e}", manifest.peft_type, hp.name)))?;
        values.insert(hp.name.clone(), value);
    }
    Ok(TunerConfig {
        peft_type: manifest.peft_type.clone(),
        values,
    })
}

pub(crate) fn check_constraints(constraints: &[Constraint], value: &HyperValue) -> std::result::Result<(), String> {
    for c in constraints {
        c.check(value)?;
    }
    Ok(())
}
