//! Tiny decoder-only transformer with injection points for every tuner family.
//!
//! Parameters live in a flat [`ParamStore`] under dotted names such as
//! `layers.1.attn.q.weight`. Tuners never replace base tensors; they add
//! their own named tensors and register entries in the model's
//! [`HookTable`], which `forward` consults at fixed sites.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::numcore::{ParamStore, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

fn default_ln_eps() -> f64 {
    1e-5
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub tie_output_head: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl ModelSpec {
    /// The fixed toy configuration used by bundled configs and tests.
    pub fn reference() -> Self {
        Self {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 64,
            vocab_size: 64,
            max_seq: 64,
            tie_output_head: true,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err(format!("model spec: {name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(config_err(format!(
                "model spec: n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(config_err("model spec: ln_eps must be a small positive number"));
        }
        Ok(())
    }

    /// Stable hash of every spec field.
    pub fn fingerprint(&self) -> u64 {
        let canonical = format!(
            "n_layers={};d_model={};n_heads={};d_ff={};vocab_size={};max_seq={};tie_output_head={};ln_eps={:016x}",
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
            self.max_seq,
            self.tie_output_head,
            self.ln_eps.to_bits()
        );
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Name and shape of every base parameter, in construction order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, ff) = (self.d_model, self.vocab_size, self.d_ff);
        let mut out = vec![
            ("tok_emb.weight".to_string(), vec![v, d]),
            ("pos_emb.weight".to_string(), vec![self.max_seq, d]),
        ];
        for l in 0..self.n_layers {
            out.push((format!("layers.{l}.ln1.gamma"), vec![d]));
            out.push((format!("layers.{l}.ln1.beta"), vec![d]));
            for p in ["q", "k", "v", "o"] {
                out.push((format!("layers.{l}.attn.{p}.weight"), vec![d, d]));
                out.push((format!("layers.{l}.attn.{p}.bias"), vec![d]));
            }
            out.push((format!("layers.{l}.ln2.gamma"), vec![d]));
            out.push((format!("layers.{l}.ln2.beta"), vec![d]));
            out.push((format!("layers.{l}.ffn.up.weight"), vec![ff, d]));
            out.push((format!("layers.{l}.ffn.up.bias"), vec![ff]));
            out.push((format!("layers.{l}.ffn.down.weight"), vec![d, ff]));
            out.push((format!("layers.{l}.ffn.down.bias"), vec![d]));
        }
        out.push(("ln_f.gamma".to_string(), vec![d]));
        out.push(("ln_f.beta".to_string(), vec![d]));
        if !self.tie_output_head {
            out.push(("head.weight".to_string(), vec![v, d]));
        }
        out
    }

    /// Names of every linear layer, e.g. `layers.0.attn.q`.
    pub fn linear_sites(&self) -> Vec<String> {
        (0..self.n_layers)
            .flat_map(|l| {
                ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.up", "ffn.down"]
                    .into_iter()
                    .map(move |s| format!("layers.{l}.{s}"))
            })
            .collect()
    }

    /// Output width of a linear site.
    pub fn site_width(&self, site: &str) -> Option<usize> {
        let kind = site.rsplit_once('.').map(|(_, k)| k)?;
        match kind {
            "q" | "k" | "v" | "o" | "down" => Some(self.d_model),
            "up" | "act" => Some(self.d_ff),
            _ => None,
        }
    }

    /// Input width of a linear site.
    pub fn site_input_width(&self, site: &str) -> Option<usize> {
        match site.rsplit_once('.').map(|(_, k)| k)? {
            "q" | "k" | "v" | "o" | "up" => Some(self.d_model),
            "down" => Some(self.d_ff),
            _ => None,
        }
    }
}

/// True when `name` equals `suffix` or ends with `.{suffix}`.
pub fn matches_suffix(name: &str, suffix: &str) -> bool {
    name == suffix
        || (name.len() > suffix.len()
            && name.ends_with(suffix)
            && name.as_bytes()[name.len() - suffix.len() - 1] == b'.')
}

/// Transform applied to the output of a linear (or activation) site.
#[derive(Clone, Debug, PartialEq)]
pub enum SiteHook {
    /// `y += scaling · (x · Aᵀ) · Bᵀ`
    LowRank { a: String, b: String, scaling: f64 },
    /// `y ⊙= vector`
    Rescale { vector: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Sequential,
    Parallel,
}

/// Bottleneck module `W_up · GELU(W_down · h + b_down) + b_up`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterHook {
    pub placement: Placement,
    pub down_w: String,
    pub down_b: String,
    pub up_w: String,
    pub up_b: String,
}

/// Two-layer MLP `W2 · GELU(W1 · x + b1) + b2` over named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHook {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

/// Source of per-layer key/value prefix rows.
#[derive(Clone, Debug, PartialEq)]
pub enum KvPrefixHook {
    Flat { keys: Vec<String>, values: Vec<String> },
    /// Seed rows mapped to `[len × 2·L·d]`; layer `l` reads key columns
    /// `2l·d..(2l+1)·d` and value columns `(2l+1)·d..(2l+2)·d`.
    Mlp { seed: String, mlp: MlpHook },
}

/// Source of virtual-token embeddings prepended to the input.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptHook {
    Direct { table: String },
    Encoded { seed: String, mlp: MlpHook },
}

/// Per-site wrapper slots consulted by [`TransformerModel::forward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HookTable {
    /// Keyed by site name: linear sites plus `layers.{i}.ffn.act`.
    pub sites: BTreeMap<String, Vec<SiteHook>>,
    /// Keyed by sublayer: `layers.{i}.attn` or `layers.{i}.ffn`.
    pub adapters: BTreeMap<String, Vec<AdapterHook>>,
    pub kv_prefix: Option<KvPrefixHook>,
    pub prompt: Option<PromptHook>,
}

impl HookTable {
    pub fn is_empty(&self) -> bool {
        self.sites.is_empty() && self.adapters.is_empty() && self.kv_prefix.is_none() && self.prompt.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    spec: ModelSpec,
    seed: u64,
    pub params: ParamStore,
    pub hooks: HookTable,
    active: Option<String>,
}

struct Leaves<'m> {
    params: &'m ParamStore,
    cache: HashMap<&'m str, Var>,
}

impl<'m> Leaves<'m> {
    fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.cache.get(name) {
            return Ok(v);
        }
        let (key, tensor) = self
            .params
            .get_entry(name)
            .ok_or_else(|| Error::State(format!("hook refers to missing parameter '{name}'")))?;
        let v = tape.param(key, tensor);
        self.cache.insert(key, v);
        Ok(v)
    }
}

impl TransformerModel {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut randn = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
                .expect("positive extents")
        };
        let mut params = ParamStore::new();
        for (name, shape) in spec.param_layout() {
            let t = if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                randn(&shape)
            };
            params.insert(name, t.with_requires_grad(true))?;
        }
        Ok(Self {
            spec,
            seed,
            params,
            hooks: HookTable::default(),
            active: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn count_parameters(&self, trainable_only: bool) -> usize {
        self.params.count(trainable_only)
    }

    /// peft_type of the active attachment, if any.
    pub fn active_method(&self) -> Option<&str> {
        self.active.as_deref()
    }

    pub(crate) fn set_active(&mut self, method: Option<String>) {
        self.active = method;
    }

    /// Number of virtual tokens the current hooks prepend.
    pub fn virtual_tokens(&self) -> usize {
        let rows = match &self.hooks.prompt {
            Some(PromptHook::Direct { table }) => table,
            Some(PromptHook::Encoded { seed, .. }) => seed,
            None => return 0,
        };
        self.params.get(rows).map_or(0, |t| t.shape()[0])
    }

    /// Records a forward pass and returns logits `[(n_virtual + T) × V]`.
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let spec = &self.spec;
        if tokens.is_empty() {
            return Err(Error::Data("forward called with no tokens".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= spec.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} is outside the vocabulary of size {}",
                spec.vocab_size
            )));
        }
        let n_virtual = self.virtual_tokens();
        let total = tokens.len() + n_virtual;
        if total > spec.max_seq {
            return Err(Error::Length(format!(
                "{} tokens + {n_virtual} virtual tokens exceed max_seq {}",
                tokens.len(),
                spec.max_seq
            )));
        }
        let mut leaves = Leaves {
            params: &self.params,
            cache: HashMap::new(),
        };
        let tok_table = leaves.get(tape, "tok_emb.weight")?;
        let mut x = tape.embedding(tok_table, tokens)?;
        if let Some(prompt) = &self.hooks.prompt {
            let virt = match prompt {
                PromptHook::Direct { table } => leaves.get(tape, table)?,
                PromptHook::Encoded { seed, mlp } => {
                    let s = leaves.get(tape, seed)?;
                    self.mlp(tape, &mut leaves, s, mlp)?
                }
            };
            x = tape.concat_rows(&[virt, x])?;
        }
        let pos_table = leaves.get(tape, "pos_emb.weight")?;
        let positions: Vec<usize> = (0..total).collect();
        let pos = tape.embedding(pos_table, &positions)?;
        x = tape.add(x, pos)?;

        let prefix = self.kv_prefix_blocks(tape, &mut leaves)?;

        for l in 0..spec.n_layers {
            let g1 = leaves.get(tape, &format!("layers.{l}.ln1.gamma"))?;
            let b1 = leaves.get(tape, &format!("layers.{l}.ln1.beta"))?;
            let h = tape.layer_norm(x, g1, b1, spec.ln_eps)?;
            let q = self.linear(tape, &mut leaves, h, &format!("layers.{l}.attn.q"))?;
            let mut k = self.linear(tape, &mut leaves, h, &format!("layers.{l}.attn.k"))?;
            let mut v = self.linear(tape, &mut leaves, h, &format!("layers.{l}.attn.v"))?;
            if let Some(blocks) = &prefix {
                let (pk, pv) = blocks[l];
                k = tape.concat_rows(&[pk, k])?;
                v = tape.concat_rows(&[pv, v])?;
            }
            let a = tape.causal_attention(q, k, v, spec.n_heads)?;
            let mut o = self.linear(tape, &mut leaves, a, &format!("layers.{l}.attn.o"))?;
            o = self.sequential_adapters(tape, &mut leaves, o, &format!("layers.{l}.attn"))?;
            x = tape.add(x, o)?;

            let g2 = leaves.get(tape, &format!("layers.{l}.ln2.gamma"))?;
            let b2 = leaves.get(tape, &format!("layers.{l}.ln2.beta"))?;
            let h2 = tape.layer_norm(x, g2, b2, spec.ln_eps)?;
            let up = self.linear(tape, &mut leaves, h2, &format!("layers.{l}.ffn.up"))?;
            let act = tape.gelu(up);
            let act = self.site_hooks(tape, &mut leaves, h2, act, &format!("layers.{l}.ffn.act"))?;
            let mut f = self.linear(tape, &mut leaves, act, &format!("layers.{l}.ffn.down"))?;
            f = self.sequential_adapters(tape, &mut leaves, f, &format!("layers.{l}.ffn"))?;
            for hook in self.adapter_hooks(&format!("layers.{l}.ffn"), Placement::Parallel) {
                let delta = self.adapter_delta(tape, &mut leaves, h2, hook)?;
                f = tape.add(f, delta)?;
            }
            x = tape.add(x, f)?;
        }
        let gf = leaves.get(tape, "ln_f.gamma")?;
        let bf = leaves.get(tape, "ln_f.beta")?;
        let x = tape.layer_norm(x, gf, bf, spec.ln_eps)?;
        let head = if spec.tie_output_head {
            tok_table
        } else {
            leaves.get(tape, "head.weight")?
        };
        tape.matmul_nt(x, head)
    }

    /// Convenience forward on a throwaway tape.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, tokens)?;
        Ok(tape.value(out).clone())
    }

    fn linear(&self, tape: &mut Tape, leaves: &mut Leaves<'_>, x: Var, site: &str) -> Result<Var> {
        let w = leaves.get(tape, &format!("{site}.weight"))?;
        let b = leaves.get(tape, &format!("{site}.bias"))?;
        let y = tape.matmul_nt(x, w)?;
        let y = tape.add_row(y, b)?;
        self.site_hooks(tape, leaves, x, y, site)
    }

    fn site_hooks(&self, tape: &mut Tape, leaves: &mut Leaves<'_>, input: Var, mut y: Var, site: &str) -> Result<Var> {
        let Some(hooks) = self.hooks.sites.get(site) else {
            return Ok(y);
        };
        for hook in hooks {
            y = match hook {
                SiteHook::LowRank { a, b, scaling } => {
                    let a = leaves.get(tape, a)?;
                    let b = leaves.get(tape, b)?;
                    let down = tape.matmul_nt(input, a)?;
                    let up = tape.matmul_nt(down, b)?;
                    let delta = tape.scale(up, *scaling);
                    tape.add(y, delta)?
                }
                SiteHook::Rescale { vector } => {
                    let v = leaves.get(tape, vector)?;
                    tape.mul_row(y, v)?
                }
            };
        }
        Ok(y)
    }

    fn adapter_hooks<'a>(&'a self, sublayer: &str, placement: Placement) -> impl Iterator<Item = &'a AdapterHook> {
        self.hooks
            .adapters
            .get(sublayer)
            .into_iter()
            .flatten()
            .filter(move |h| h.placement == placement)
    }

    fn sequential_adapters(&self, tape: &mut Tape, leaves: &mut Leaves<'_>, mut h: Var, sublayer: &str) -> Result<Var> {
        for hook in self.adapter_hooks(sublayer, Placement::Sequential) {
            let delta = self.adapter_delta(tape, leaves, h, hook)?;
            h = tape.add(h, delta)?;
        }
        Ok(h)
    }

    fn adapter_delta(&self, tape: &mut Tape, leaves: &mut Leaves<'_>, h: Var, hook: &AdapterHook) -> Result<Var> {
        let dw = leaves.get(tape, &hook.down_w)?;
        let db = leaves.get(tape, &hook.down_b)?;
        let uw = leaves.get(tape, &hook.up_w)?;
        let ub = leaves.get(tape, &hook.up_b)?;
        let z = tape.matmul_nt(h, dw)?;
        let z = tape.add_row(z, db)?;
        let z = tape.gelu(z);
        let z = tape.matmul_nt(z, uw)?;
        tape.add_row(z, ub)
    }

    fn mlp(&self, tape: &mut Tape, leaves: &mut Leaves<'_>, x: Var, mlp: &MlpHook) -> Result<Var> {
        let w1 = leaves.get(tape, &mlp.w1)?;
        let b1 = leaves.get(tape, &mlp.b1)?;
        let w2 = leaves.get(tape, &mlp.w2)?;
        let b2 = leaves.get(tape, &mlp.b2)?;
        let z = tape.matmul_nt(x, w1)?;
        let z = tape.add_row(z, b1)?;
        let z = tape.gelu(z);
        let z = tape.matmul_nt(z, w2)?;
        tape.add_row(z, b2)
    }

    fn kv_prefix_blocks(&self, tape: &mut Tape, leaves: &mut Leaves<'_>) -> Result<Option<Vec<(Var, Var)>>> {
        let Some(hook) = &self.hooks.kv_prefix else {
            return Ok(None);
        };
        let d = self.spec.d_model;
        let blocks = match hook {
            KvPrefixHook::Flat { keys, values } => keys
                .iter()
                .zip(values)
                .map(|(k, v)| Ok((leaves.get(tape, k)?, leaves.get(tape, v)?)))
                .collect::<Result<Vec<_>>>()?,
            KvPrefixHook::Mlp { seed, mlp } => {
                let s = leaves.get(tape, seed)?;
                let all = self.mlp(tape, leaves, s, mlp)?;
                (0..self.spec.n_layers)
                    .map(|l| {
                        Ok((
                            tape.slice_cols(all, 2 * l * d, d)?,
                            tape.slice_cols(all, (2 * l + 1) * d, d)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        if blocks.len() != self.spec.n_layers {
            return Err(Error::State(format!(
                "kv prefix supplies {} layers, model has {}",
                blocks.len(),
                self.spec.n_layers
            )));
        }
        Ok(Some(blocks))
    }
}
