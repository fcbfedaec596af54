use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::TunerConfig;
use super::manifest::Family;
use super::registry::MethodRegistry;
use crate::error::{Error, Result};
use crate::methods::{inject, resolve_primitives};
use crate::model::{SiteHook, TransformerModel};

/// Record of a live attachment: which tensors train, which stay frozen.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttachHandle {
    pub peft_type: String,
    pub family: Family,
    pub config: TunerConfig,
    /// Tensors the method added; every name starts with the method prefix.
    pub injected: Vec<String>,
    /// Existing tensors the method unfroze.
    pub unfrozen: Vec<String>,
    pub frozen: Vec<String>,
    /// Hook slots the method occupies, e.g. `site:layers.0.attn.q`.
    pub hooks: Vec<String>,
    pub mergeable: bool,
}

impl AttachHandle {
    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.injected.iter().chain(&self.unfrozen).map(String::as_str)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable().any(|n| n == name)
    }
}

fn attach_rng(model: &TransformerModel, peft_type: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(model.seed().to_le_bytes());
    h.update(peft_type.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

/// Freezes the base model and injects the method described by `config`.
pub fn attach(model: &mut TransformerModel, registry: &MethodRegistry, config: &TunerConfig) -> Result<AttachHandle> {
    if let Some(active) = model.active_method() {
        return Err(Error::State(format!(
            "model already has an active '{active}' attachment; rebuild the model to attach another method"
        )));
    }
    let manifest = registry.get(&config.peft_type)?;
    let prims = resolve_primitives(&manifest.implementation, config)?;
    let staged = inject(model, &manifest.prefix, &prims, attach_rng(model, &config.peft_type))?;

    let before = model.hooks.clone();
    let mut hooks = Vec::new();
    for (site, list) in &staged.hooks.sites {
        if list.len() > before.sites.get(site).map_or(0, Vec::len) {
            hooks.push(format!("site:{site}"));
        }
    }
    for (site, list) in &staged.hooks.adapters {
        if list.len() > before.adapters.get(site).map_or(0, Vec::len) {
            hooks.push(format!("adapter:{site}"));
        }
    }
    if staged.hooks.kv_prefix.is_some() && before.kv_prefix.is_none() {
        hooks.push("kv_prefix".into());
    }
    if staged.hooks.prompt.is_some() && before.prompt.is_none() {
        hooks.push("prompt".into());
    }

    for (_, t) in model.params.iter_mut() {
        t.set_requires_grad(false);
    }
    for name in &staged.unfrozen {
        model.params.get_mut(name).expect("matched name").set_requires_grad(true);
    }
    let mut injected = Vec::with_capacity(staged.params.len());
    for (name, t) in staged.params {
        model.params.insert(name.clone(), t.with_requires_grad(true))?;
        injected.push(name);
    }
    model.hooks = staged.hooks;
    model.set_active(Some(config.peft_type.clone()));

    let frozen = model
        .params
        .iter()
        .filter(|(_, t)| !t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect();
    Ok(AttachHandle {
        peft_type: config.peft_type.clone(),
        family: manifest.family,
        config: config.clone(),
        injected,
        unfrozen: staged.unfrozen,
        frozen,
        hooks,
        mergeable: manifest.mergeable(),
    })
}

/// Folds low-rank deltas into the base weights and removes the attachment.
pub fn merge(model: &mut TransformerModel, handle: AttachHandle) -> Result<()> {
    if !handle.mergeable {
        return Err(Error::Capability(format!(
            "method '{}' cannot be merged into base weights",
            handle.peft_type
        )));
    }
    if model.active_method() != Some(handle.peft_type.as_str()) {
        return Err(Error::State(format!(
            "handle for '{}' does not match the model's active attachment",
            handle.peft_type
        )));
    }
    let sites: Vec<(String, Vec<SiteHook>)> = model
        .hooks
        .sites
        .iter()
        .map(|(s, h)| (s.clone(), h.clone()))
        .collect();
    for (site, hooks) in sites {
        for hook in hooks {
            let SiteHook::LowRank { a, b, scaling } = hook else {
                continue;
            };
            let a = model.params.expect(&a)?.clone();
            let b = model.params.expect(&b)?.clone();
            let (r, input) = (a.shape()[0], a.shape()[1]);
            let output = b.shape()[0];
            let weight = model
                .params
                .get_mut(&format!("{site}.weight"))
                .ok_or_else(|| Error::State(format!("no base weight for site '{site}'")))?;
            let w = weight.data_mut();
            for o in 0..output {
                for i in 0..input {
                    let mut delta = 0.0;
                    for k in 0..r {
                        delta += b.data()[o * r + k] * a.data()[k * input + i];
                    }
                    w[o * input + i] += scaling * delta;
                }
            }
        }
    }
    model.hooks.sites.clear();
    for name in &handle.injected {
        model.params.remove(name);
    }
    model.set_active(None);
    Ok(())
}
