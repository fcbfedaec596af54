//! Method descriptors: the `manifest` (config) and `impl` (model) files.
//!
//! Both are TOML documents. The grammar is documented in `docs/manifest.md`.
//! Syntax and schema errors carry the line and column reported by the TOML
//! parser; semantic validation errors name the offending attribute.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::HyperValue;
use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Reparametrized,
    SoftPrompt,
    Adapter,
    Selective,
}

impl Family {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "reparametrized" => Family::Reparametrized,
            "soft_prompt" => Family::SoftPrompt,
            "adapter" => Family::Adapter,
            "selective" => Family::Selective,
            _ => return None,
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Reparametrized => "reparametrized",
            Family::SoftPrompt => "soft_prompt",
            Family::Adapter => "adapter",
            Family::Selective => "selective",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HyperKind {
    Int,
    Float,
    String,
    StringList,
    Pattern,
}

impl HyperKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "int" => HyperKind::Int,
            "float" => HyperKind::Float,
            "string" => HyperKind::String,
            "string-list" => HyperKind::StringList,
            "pattern" => HyperKind::Pattern,
            _ => return None,
        })
    }

    fn is_list(self) -> bool {
        matches!(self, HyperKind::StringList | HyperKind::Pattern)
    }

    fn is_numeric(self) -> bool {
        matches!(self, HyperKind::Int | HyperKind::Float)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Constraint {
    Ge(f64),
    Gt(f64),
    Le(f64),
    Lt(f64),
    OneOf(Vec<String>),
    NonEmpty,
}

impl Constraint {
    fn parse(text: &str, kind: HyperKind) -> std::result::Result<Self, String> {
        let text = text.trim();
        let numeric = |rest: &str| -> std::result::Result<f64, String> {
            if !kind.is_numeric() {
                return Err(format!("comparison '{text}' on non-numeric kind"));
            }
            rest.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad bound in constraint '{text}'"))
        };
        if let Some(rest) = text.strip_prefix(">=") {
            Ok(Constraint::Ge(numeric(rest)?))
        } else if let Some(rest) = text.strip_prefix("<=") {
            Ok(Constraint::Le(numeric(rest)?))
        } else if let Some(rest) = text.strip_prefix('>') {
            Ok(Constraint::Gt(numeric(rest)?))
        } else if let Some(rest) = text.strip_prefix('<') {
            Ok(Constraint::Lt(numeric(rest)?))
        } else if let Some(rest) = text.strip_prefix("one_of") {
            if kind != HyperKind::String {
                return Err(format!("'one_of' needs a string kind in '{text}'"));
            }
            let options: Vec<String> = rest.split('|').map(|s| s.trim().to_string()).collect();
            if options.iter().any(String::is_empty) {
                return Err(format!("empty option in '{text}'"));
            }
            Ok(Constraint::OneOf(options))
        } else if text == "nonempty" {
            Ok(Constraint::NonEmpty)
        } else {
            Err(format!("unrecognized constraint '{text}'"))
        }
    }

    pub fn check(&self, value: &HyperValue) -> std::result::Result<(), String> {
        let ok = match (self, value) {
            (Constraint::Ge(b), v) => v.as_float().is_some_and(|x| x >= *b),
            (Constraint::Gt(b), v) => v.as_float().is_some_and(|x| x > *b),
            (Constraint::Le(b), v) => v.as_float().is_some_and(|x| x <= *b),
            (Constraint::Lt(b), v) => v.as_float().is_some_and(|x| x < *b),
            (Constraint::OneOf(opts), HyperValue::Str(s)) => opts.iter().any(|o| o == s),
            (Constraint::OneOf(_), _) => false,
            (Constraint::NonEmpty, HyperValue::List(items)) => !items.is_empty(),
            (Constraint::NonEmpty, HyperValue::Str(s)) => !s.is_empty(),
            (Constraint::NonEmpty, _) => true,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("value '{value}' violates constraint {self}"))
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Ge(b) => write!(f, ">= {b}"),
            Constraint::Gt(b) => write!(f, "> {b}"),
            Constraint::Le(b) => write!(f, "<= {b}"),
            Constraint::Lt(b) => write!(f, "< {b}"),
            Constraint::OneOf(o) => write!(f, "one_of {}", o.join("|")),
            Constraint::NonEmpty => f.write_str("nonempty"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparameter {
    pub name: String,
    pub kind: HyperKind,
    pub default: HyperValue,
    pub constraints: Vec<Constraint>,
}

/// Tuner primitive a method composes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Selective,
    LowRank,
    Rescale,
    Bottleneck,
    VirtualTokens,
    KvPrefix,
}

impl PrimitiveKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "selective" => PrimitiveKind::Selective,
            "low_rank" => PrimitiveKind::LowRank,
            "rescale" => PrimitiveKind::Rescale,
            "bottleneck" => PrimitiveKind::Bottleneck,
            "virtual_tokens" => PrimitiveKind::VirtualTokens,
            "kv_prefix" => PrimitiveKind::KvPrefix,
            _ => return None,
        })
    }

    /// `(field, kind, required)` for every field the primitive accepts.
    pub(crate) fn fields(self) -> &'static [(&'static str, HyperKind, bool)] {
        use HyperKind::*;
        match self {
            PrimitiveKind::Selective => &[("patterns", Pattern, true)],
            PrimitiveKind::LowRank => &[("targets", StringList, true), ("rank", Int, true), ("alpha", Float, true)],
            PrimitiveKind::Rescale => &[("sites", StringList, true)],
            PrimitiveKind::Bottleneck => &[("dim", Int, true), ("placement", String, true)],
            PrimitiveKind::VirtualTokens => &[
                ("count", Int, true),
                ("init", String, false),
                ("encoder_hidden", Int, false),
            ],
            PrimitiveKind::KvPrefix => &[("length", Int, true), ("reparam", String, false), ("hidden", Int, false)],
        }
    }
}

/// A primitive field: either a literal or a `$name` reference to a hyperparameter.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldValue {
    Literal(HyperValue),
    Ref(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveSpec {
    pub kind: PrimitiveKind,
    pub fields: BTreeMap<String, FieldValue>,
}

/// A discovered or built-in method: its config schema plus implementation.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodManifest {
    pub peft_type: String,
    pub family: Family,
    pub prefix: String,
    pub description: Option<String>,
    pub hyperparameters: Vec<Hyperparameter>,
    pub implementation: Vec<PrimitiveSpec>,
}

impl MethodManifest {
    pub fn hyperparameter(&self, name: &str) -> Option<&Hyperparameter> {
        self.hyperparameters.iter().find(|h| h.name == name)
    }

    /// Parses and validates both descriptor files.
    pub fn parse(manifest_text: &str, impl_text: &str) -> Result<Self> {
        let config = ConfigDescriptor::parse(manifest_text)?;
        let implementation = parse_impl(impl_text, &config.hyperparameters)?;
        Ok(Self {
            peft_type: config.peft_type,
            family: config.family,
            prefix: config.prefix,
            description: config.description,
            hyperparameters: config.hyperparameters,
            implementation,
        })
    }

    /// True when every primitive is a low-rank delta, which can be folded into base weights.
    pub fn mergeable(&self) -> bool {
        !self.implementation.is_empty()
            && self.implementation.iter().all(|p| p.kind == PrimitiveKind::LowRank)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    method: MethodSection,
    #[serde(default)]
    hyperparameter: Vec<HyperSection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodSection {
    peft_type: Option<String>,
    family: Option<String>,
    prefix: Option<String>,
    description: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HyperSection {
    name: String,
    kind: String,
    default: Option<toml::Value>,
    constraint: Option<String>,
}

struct ConfigDescriptor {
    peft_type: String,
    family: Family,
    prefix: String,
    description: Option<String>,
    hyperparameters: Vec<Hyperparameter>,
}

impl ConfigDescriptor {
    fn parse(text: &str) -> Result<Self> {
        let file: ManifestFile =
            toml::from_str(text).map_err(|e| config_err(format!("manifest: {}", e.to_string().trim_end())))?;
        let required = |v: Option<String>, what: &str| match v {
            Some(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
            _ => Err(config_err(format!("manifest: missing required attribute '{what}'"))),
        };
        let peft_type = required(file.method.peft_type, "peft_type")?;
        let family_text = required(file.method.family, "family")?;
        let prefix = required(file.method.prefix, "prefix")?;
        let family = Family::parse(&family_text)
            .ok_or_else(|| config_err(format!("manifest: unknown family '{family_text}'")))?;
        let mut hyperparameters: Vec<Hyperparameter> = Vec::new();
        for h in file.hyperparameter {
            let ctx = |msg: String| config_err(format!("manifest: hyperparameter '{}': {msg}", h.name));
            if h.name.trim().is_empty() {
                return Err(config_err("manifest: hyperparameter with empty name"));
            }
            if hyperparameters.iter().any(|x| x.name == h.name) {
                return Err(ctx("declared twice".into()));
            }
            let kind = HyperKind::parse(&h.kind).ok_or_else(|| ctx(format!("unknown kind '{}'", h.kind)))?;
            let default = h.default.as_ref().ok_or_else(|| ctx("missing default".into()))?;
            let default = literal(default, kind).map_err(ctx)?;
            let constraints = h
                .constraint
                .as_deref()
                .map(|c| {
                    c.split(';')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| Constraint::parse(s, kind))
                        .collect::<std::result::Result<Vec<_>, _>>()
                })
                .transpose()
                .map_err(ctx)?
                .unwrap_or_default();
            for c in &constraints {
                c.check(&default).map_err(|e| ctx(format!("default {e}")))?;
            }
            hyperparameters.push(Hyperparameter {
                name: h.name,
                kind,
                default,
                constraints,
            });
        }
        Ok(Self {
            peft_type,
            family,
            prefix,
            description: file.method.description,
            hyperparameters,
        })
    }
}

fn literal(value: &toml::Value, kind: HyperKind) -> std::result::Result<HyperValue, String> {
    match (value, kind) {
        (toml::Value::Integer(i), HyperKind::Int) => Ok(HyperValue::Int(*i)),
        (toml::Value::Integer(i), HyperKind::Float) => Ok(HyperValue::Float(*i as f64)),
        (toml::Value::Float(x), HyperKind::Float) if x.is_finite() => Ok(HyperValue::Float(*x)),
        (toml::Value::String(s), HyperKind::String) => Ok(HyperValue::Str(s.clone())),
        (toml::Value::String(s), k) if k.is_list() => HyperValue::parse(k, s),
        (toml::Value::Array(items), k) if k.is_list() => {
            let mut out = Vec::with_capacity(items.len());
            for item in items {
                match item {
                    toml::Value::String(s) if !s.trim().is_empty() => out.push(s.trim().to_string()),
                    other => return Err(format!("list item {other} is not a nonempty string")),
                }
            }
            Ok(HyperValue::List(out))
        }
        (other, k) => Err(format!("value {other} does not fit kind {k:?}")),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ImplFile {
    #[serde(rename = "impl")]
    implementation: ImplSection,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ImplSection {
    #[serde(default)]
    primitive: Vec<toml::Table>,
}

fn ref_compatible(field: HyperKind, declared: HyperKind) -> bool {
    field == declared
        || (field == HyperKind::Float && declared == HyperKind::Int)
        || (field.is_list() && declared.is_list())
}

fn parse_impl(text: &str, schema: &[Hyperparameter]) -> Result<Vec<PrimitiveSpec>> {
    let file: ImplFile =
        toml::from_str(text).map_err(|e| config_err(format!("impl: {}", e.to_string().trim_end())))?;
    let prims = file.implementation.primitive;
    if prims.is_empty() {
        return Err(config_err("impl: no primitives declared"));
    }
    let mut out = Vec::with_capacity(prims.len());
    for (i, table) in prims.into_iter().enumerate() {
        let ctx = |msg: String| config_err(format!("impl: primitive #{}: {msg}", i + 1));
        let kind_text = table
            .get("kind")
            .and_then(toml::Value::as_str)
            .ok_or_else(|| ctx("missing 'kind'".into()))?;
        let kind = PrimitiveKind::parse(kind_text).ok_or_else(|| ctx(format!("unknown kind '{kind_text}'")))?;
        let allowed = kind.fields();
        let mut fields = BTreeMap::new();
        for (key, value) in &table {
            if key == "kind" {
                continue;
            }
            let Some(&(_, fkind, _)) = allowed.iter().find(|(n, _, _)| n == key) else {
                let names: Vec<&str> = allowed.iter().map(|f| f.0).collect();
                return Err(ctx(format!(
                    "unknown field '{key}' for {kind_text}; expected one of [{}]",
                    names.join(", ")
                )));
            };
            let fv = match value.as_str().and_then(|s| s.strip_prefix('$')) {
                Some(name) => {
                    let hp = schema
                        .iter()
                        .find(|h| h.name == name)
                        .ok_or_else(|| ctx(format!("field '{key}' refers to undeclared hyperparameter '{name}'")))?;
                    if !ref_compatible(fkind, hp.kind) {
                        return Err(ctx(format!(
                            "field '{key}' needs {fkind:?} but '{name}' is {:?}",
                            hp.kind
                        )));
                    }
                    FieldValue::Ref(name.to_string())
                }
                None => FieldValue::Literal(literal(value, fkind).map_err(|e| ctx(format!("field '{key}': {e}")))?),
            };
            fields.insert(key.clone(), fv);
        }
        for (name, _, required) in allowed {
            if *required && !fields.contains_key(*name) {
                return Err(ctx(format!("missing required field '{name}'")));
            }
        }
        out.push(PrimitiveSpec { kind, fields });
    }
    let count = |k: PrimitiveKind| out.iter().filter(|p| p.kind == k).count();
    if count(PrimitiveKind::VirtualTokens) > 1 || count(PrimitiveKind::KvPrefix) > 1 {
        return Err(config_err(
            "impl: at most one virtual_tokens and one kv_prefix primitive per method",
        ));
    }
    Ok(out)
}
