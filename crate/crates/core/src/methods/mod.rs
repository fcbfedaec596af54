//! Built-in tuner semantics.
//!
//! Every method, built-in or discovered, is a composition of the primitives
//! below. A primitive's settings carry the closed-form count of parameters it
//! makes trainable; `inject` realizes it on a model.

mod inject;

use crate::error::{config_err, Result};
use crate::model::{matches_suffix, ModelSpec, Placement, TransformerModel};
use crate::peft::config::{HyperValue, TunerConfig};
use crate::peft::manifest::{FieldValue, PrimitiveKind, PrimitiveSpec};
use crate::peft::{attach, AttachHandle, MethodRegistry};

pub(crate) use inject::inject;

/// Low-rank delta `ΔW = (alpha / r) · B · A` on every linear layer matching `targets`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSettings {
    pub r: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl LoraSettings {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn resolve_sites(&self, spec: &ModelSpec) -> Result<Vec<String>> {
        resolve_sites(&self.targets, &spec.linear_sites(), "lora target")
    }

    pub fn trainable_count(&self, spec: &ModelSpec) -> Result<usize> {
        Ok(self
            .resolve_sites(spec)?
            .iter()
            .map(|s| {
                let (input, output) = (spec.site_input_width(s).unwrap(), spec.site_width(s).unwrap());
                self.r * input + output * self.r
            })
            .sum())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptInit {
    Random,
    VocabSample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSettings {
    pub num_virtual_tokens: usize,
    pub init: PromptInit,
}

impl PromptSettings {
    pub fn trainable_count(&self, spec: &ModelSpec) -> usize {
        self.num_virtual_tokens * spec.d_model
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefixReparam {
    Flat,
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixSettings {
    pub prefix_len: usize,
    pub reparam: PrefixReparam,
    pub mlp_hidden: usize,
}

impl PrefixSettings {
    pub fn trainable_count(&self, spec: &ModelSpec) -> usize {
        let (l, d, p, h) = (spec.n_layers, spec.d_model, self.prefix_len, self.mlp_hidden);
        match self.reparam {
            PrefixReparam::Flat => l * 2 * p * d,
            PrefixReparam::Mlp => p * d + (d * h + h) + (h * 2 * l * d + 2 * l * d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PTuningSettings {
    pub num_virtual_tokens: usize,
    pub encoder_hidden: usize,
}

impl PTuningSettings {
    pub fn trainable_count(&self, spec: &ModelSpec) -> usize {
        let (n, d, h) = (self.num_virtual_tokens, spec.d_model, self.encoder_hidden);
        n * d + (d * h + h) + (h * d + d)
    }
}

/// Elementwise rescaling vectors, initialized to ones.
#[derive(Clone, Debug, PartialEq)]
pub struct IA3Settings {
    /// Site suffixes: linear sites or `ffn.act`.
    pub sites: Vec<String>,
}

impl Default for IA3Settings {
    fn default() -> Self {
        Self {
            sites: vec!["attn.k".into(), "attn.v".into(), "ffn.act".into()],
        }
    }
}

impl IA3Settings {
    pub fn resolve_sites(&self, spec: &ModelSpec) -> Result<Vec<String>> {
        let mut all = spec.linear_sites();
        all.extend((0..spec.n_layers).map(|l| format!("layers.{l}.ffn.act")));
        resolve_sites(&self.sites, &all, "rescale site")
    }

    pub fn trainable_count(&self, spec: &ModelSpec) -> Result<usize> {
        Ok(self
            .resolve_sites(spec)?
            .iter()
            .map(|s| spec.site_width(s).unwrap())
            .sum())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckSettings {
    pub bottleneck_dim: usize,
    pub placement: Placement,
}

impl BottleneckSettings {
    pub fn adapters_per_layer(&self) -> usize {
        match self.placement {
            Placement::Sequential => 2,
            Placement::Parallel => 1,
        }
    }

    pub fn trainable_count(&self, spec: &ModelSpec) -> usize {
        let (d, b) = (spec.d_model, self.bottleneck_dim);
        spec.n_layers * self.adapters_per_layer() * (b * d + b + d * b + d)
    }
}

/// Unfreezes existing parameters whose names end in one of the patterns.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectivePattern {
    pub unfreeze_patterns: Vec<String>,
}

impl SelectivePattern {
    pub fn bitfit() -> Self {
        Self {
            unfreeze_patterns: vec!["bias".into(), "beta".into()],
        }
    }

    pub fn lntuning() -> Self {
        Self {
            unfreeze_patterns: vec!["gamma".into(), "beta".into()],
        }
    }

    pub fn matches(&self, name: &str) -> bool {
        self.unfreeze_patterns.iter().any(|p| matches_suffix(name, p))
    }

    /// Element count of matched parameters, from the spec's layout alone.
    pub fn trainable_count(&self, spec: &ModelSpec) -> usize {
        spec.param_layout()
            .iter()
            .filter(|(name, _)| self.matches(name))
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }
}

/// A primitive with every field resolved to a concrete value.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Selective(SelectivePattern),
    LowRank(LoraSettings),
    Rescale(IA3Settings),
    Bottleneck(BottleneckSettings),
    Prompt(PromptSettings),
    PTuning(PTuningSettings),
    Prefix(PrefixSettings),
}

impl Primitive {
    pub fn resolve(spec: &PrimitiveSpec, config: &TunerConfig) -> Result<Self> {
        let get = |field: &str| -> Option<HyperValue> {
            match spec.fields.get(field)? {
                FieldValue::Literal(v) => Some(v.clone()),
                FieldValue::Ref(name) => config.get(name).cloned(),
            }
        };
        let missing = |field: &str| config_err(format!("primitive field '{field}' could not be resolved"));
        let positive = |field: &str| -> Result<usize> {
            let v = get(field).and_then(|v| v.as_int()).ok_or_else(|| missing(field))?;
            usize::try_from(v)
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| config_err(format!("{field} must be positive, got {v}")))
        };
        let list = |field: &str| -> Result<Vec<String>> {
            let v = get(field).ok_or_else(|| missing(field))?;
            let items = v.as_list().ok_or_else(|| missing(field))?.to_vec();
            if items.is_empty() {
                return Err(config_err(format!("{field} must not be empty")));
            }
            Ok(items)
        };
        let text = |field: &str, default: &str| -> Result<String> {
            match get(field) {
                None => Ok(default.to_string()),
                Some(v) => v.as_str().map(String::from).ok_or_else(|| missing(field)),
            }
        };
        Ok(match spec.kind {
            PrimitiveKind::Selective => Primitive::Selective(SelectivePattern {
                unfreeze_patterns: list("patterns")?,
            }),
            PrimitiveKind::LowRank => {
                let alpha = get("alpha").and_then(|v| v.as_float()).ok_or_else(|| missing("alpha"))?;
                if !(alpha > 0.0) {
                    return Err(config_err(format!("alpha must be positive, got {alpha}")));
                }
                Primitive::LowRank(LoraSettings {
                    r: positive("rank")?,
                    alpha,
                    targets: list("targets")?,
                })
            }
            PrimitiveKind::Rescale => Primitive::Rescale(IA3Settings { sites: list("sites")? }),
            PrimitiveKind::Bottleneck => {
                let placement = match text("placement", "sequential")?.as_str() {
                    "sequential" => Placement::Sequential,
                    "parallel" => Placement::Parallel,
                    other => return Err(config_err(format!("unknown adapter placement '{other}'"))),
                };
                Primitive::Bottleneck(BottleneckSettings {
                    bottleneck_dim: positive("dim")?,
                    placement,
                })
            }
            PrimitiveKind::VirtualTokens => {
                let count = positive("count")?;
                match get("encoder_hidden").and_then(|v| v.as_int()) {
                    Some(h) if h > 0 => Primitive::PTuning(PTuningSettings {
                        num_virtual_tokens: count,
                        encoder_hidden: h as usize,
                    }),
                    Some(h) if h < 0 => return Err(config_err(format!("encoder_hidden must be >= 0, got {h}"))),
                    _ => {
                        let init = match text("init", "random")?.as_str() {
                            "random" => PromptInit::Random,
                            "vocab_sample" => PromptInit::VocabSample,
                            other => return Err(config_err(format!("unknown prompt init '{other}'"))),
                        };
                        Primitive::Prompt(PromptSettings {
                            num_virtual_tokens: count,
                            init,
                        })
                    }
                }
            }
            PrimitiveKind::KvPrefix => {
                let reparam = match text("reparam", "flat")?.as_str() {
                    "flat" => PrefixReparam::Flat,
                    "mlp" => PrefixReparam::Mlp,
                    other => return Err(config_err(format!("unknown prefix reparametrization '{other}'"))),
                };
                let mlp_hidden = if spec.fields.contains_key("hidden") { positive("hidden")? } else { 32 };
                Primitive::Prefix(PrefixSettings {
                    prefix_len: positive("length")?,
                    reparam,
                    mlp_hidden,
                })
            }
        })
    }

    /// Closed-form number of parameters this primitive makes trainable.
    pub fn trainable_count(&self, spec: &ModelSpec) -> Result<usize> {
        Ok(match self {
            Primitive::Selective(s) => s.trainable_count(spec),
            Primitive::LowRank(s) => s.trainable_count(spec)?,
            Primitive::Rescale(s) => s.trainable_count(spec)?,
            Primitive::Bottleneck(s) => s.trainable_count(spec),
            Primitive::Prompt(s) => s.trainable_count(spec),
            Primitive::PTuning(s) => s.trainable_count(spec),
            Primitive::Prefix(s) => s.trainable_count(spec),
        })
    }
}

/// Resolves every primitive of a method against a config.
pub fn resolve_primitives(specs: &[PrimitiveSpec], config: &TunerConfig) -> Result<Vec<Primitive>> {
    specs.iter().map(|s| Primitive::resolve(s, config)).collect()
}

/// Closed-form trainable count of a whole method. Primitives that unfreeze
/// the same base tensor are counted once.
pub fn expected_trainable(prims: &[Primitive], spec: &ModelSpec) -> Result<usize> {
    let selective: Vec<&SelectivePattern> = prims
        .iter()
        .filter_map(|p| match p {
            Primitive::Selective(s) => Some(s),
            _ => None,
        })
        .collect();
    let unfrozen: usize = spec
        .param_layout()
        .iter()
        .filter(|(name, _)| selective.iter().any(|s| s.matches(name)))
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    let injected = prims
        .iter()
        .filter(|p| !matches!(p, Primitive::Selective(_)))
        .map(|p| p.trainable_count(spec))
        .sum::<Result<usize>>()?;
    Ok(unfrozen + injected)
}

fn resolve_sites(patterns: &[String], sites: &[String], what: &str) -> Result<Vec<String>> {
    for p in patterns {
        if !sites.iter().any(|s| matches_suffix(s, p)) {
            return Err(config_err(format!("{what} '{p}' matches no site in the model")));
        }
    }
    Ok(sites
        .iter()
        .filter(|s| patterns.iter().any(|p| matches_suffix(s, p)))
        .cloned()
        .collect())
}

fn attach_builtin(model: &mut TransformerModel, peft_type: &str, raw: &[(&str, String)]) -> Result<AttachHandle> {
    let registry = MethodRegistry::builtin();
    let raw = raw.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    let config = crate::peft::parse_config(&registry, peft_type, &raw)?;
    attach(model, &registry, &config)
}

pub fn apply_lora(model: &mut TransformerModel, s: &LoraSettings) -> Result<AttachHandle> {
    attach_builtin(
        model,
        "lora",
        &[("r", s.r.to_string()), ("alpha", format!("{:?}", s.alpha)), ("targets", s.targets.join(","))],
    )
}

pub fn apply_prompt_tuning(model: &mut TransformerModel, s: &PromptSettings) -> Result<AttachHandle> {
    let init = match s.init {
        PromptInit::Random => "random",
        PromptInit::VocabSample => "vocab_sample",
    };
    attach_builtin(
        model,
        "prompt_tuning",
        &[("num_virtual_tokens", s.num_virtual_tokens.to_string()), ("init", init.into())],
    )
}

pub fn apply_prefix_tuning(model: &mut TransformerModel, s: &PrefixSettings) -> Result<AttachHandle> {
    let reparam = match s.reparam {
        PrefixReparam::Flat => "flat",
        PrefixReparam::Mlp => "mlp",
    };
    attach_builtin(
        model,
        "prefix_tuning",
        &[
            ("prefix_len", s.prefix_len.to_string()),
            ("reparam", reparam.into()),
            ("mlp_hidden", s.mlp_hidden.to_string()),
        ],
    )
}

pub fn apply_ptuning(model: &mut TransformerModel, s: &PTuningSettings) -> Result<AttachHandle> {
    attach_builtin(
        model,
        "p_tuning",
        &[
            ("num_virtual_tokens", s.num_virtual_tokens.to_string()),
            ("encoder_hidden", s.encoder_hidden.to_string()),
        ],
    )
}

pub fn apply_ia3(model: &mut TransformerModel, _s: &IA3Settings) -> Result<AttachHandle> {
    attach_builtin(model, "ia3", &[])
}

pub fn apply_bottleneck(model: &mut TransformerModel, s: &BottleneckSettings) -> Result<AttachHandle> {
    let dim = [("bottleneck_dim", s.bottleneck_dim.to_string())];
    match s.placement {
        Placement::Sequential => attach_builtin(model, "bottleneck", &dim),
        Placement::Parallel => attach_builtin(model, "parallel_adapter", &dim),
    }
}

pub fn apply_selective(model: &mut TransformerModel, s: &SelectivePattern) -> Result<AttachHandle> {
    attach_builtin(model, "bitfit", &[("patterns", s.unfreeze_patterns.join(","))])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec::reference()
    }

    #[test]
    fn reference_counts() {
        let lora = LoraSettings {
            r: 2,
            alpha: 4.0,
            targets: vec!["attn.q".into(), "attn.v".into()],
        };
        assert_eq!(lora.trainable_count(&spec()).unwrap(), 256);
        let prompt = PromptSettings {
            num_virtual_tokens: 8,
            init: PromptInit::Random,
        };
        assert_eq!(prompt.trainable_count(&spec()), 128);
        let prefix = PrefixSettings {
            prefix_len: 4,
            reparam: PrefixReparam::Flat,
            mlp_hidden: 32,
        };
        assert_eq!(prefix.trainable_count(&spec()), 256);
        let pt = PTuningSettings {
            num_virtual_tokens: 8,
            encoder_hidden: 32,
        };
        assert_eq!(pt.trainable_count(&spec()), 1200);
        assert_eq!(IA3Settings::default().trainable_count(&spec()).unwrap(), 192);
        let seq = BottleneckSettings {
            bottleneck_dim: 4,
            placement: Placement::Sequential,
        };
        assert_eq!(seq.trainable_count(&spec()), 592);
        let par = BottleneckSettings {
            placement: Placement::Parallel,
            ..seq
        };
        assert_eq!(par.trainable_count(&spec()), 296);
        assert_eq!(SelectivePattern::bitfit().trainable_count(&spec()), 368);
        assert_eq!(SelectivePattern::lntuning().trainable_count(&spec()), 160);
    }

    #[test]
    fn bitfit_closed_form() {
        // L·(4d attention biases + d_ff + d FFN biases + 2d LN shifts) + d final shift
        for (l, d, ff) in [(1, 8, 16), (3, 12, 40), (2, 16, 64)] {
            let s = ModelSpec {
                n_layers: l,
                d_model: d,
                d_ff: ff,
                ..ModelSpec::reference()
            };
            assert_eq!(SelectivePattern::bitfit().trainable_count(&s), l * (7 * d + ff) + d);
        }
    }

    #[test]
    fn unresolvable_target_is_config_error() {
        let lora = LoraSettings {
            r: 2,
            alpha: 4.0,
            targets: vec!["attn.x".into()],
        };
        assert!(matches!(lora.trainable_count(&spec()), Err(crate::Error::Config(_))));
    }
}
