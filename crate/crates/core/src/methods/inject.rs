use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    BottleneckSettings, IA3Settings, LoraSettings, PTuningSettings, PrefixReparam, PrefixSettings, Primitive,
    PromptInit, PromptSettings, SelectivePattern,
};
use crate::error::{config_err, Error, Result};
use crate::model::{AdapterHook, HookTable, KvPrefixHook, MlpHook, PromptHook, SiteHook, TransformerModel, INIT_STD};
use crate::numcore::Tensor;

/// Staged changes for one attachment; committed by `peft::attach` only if every primitive succeeds.
#[derive(Debug)]
pub(crate) struct Injection {
    pub params: Vec<(String, Tensor)>,
    pub hooks: HookTable,
    pub unfrozen: Vec<String>,
}

struct Injector<'a> {
    model: &'a TransformerModel,
    prefix: &'a str,
    rng: ChaCha8Rng,
    out: Injection,
}

pub(crate) fn inject(model: &TransformerModel, prefix: &str, prims: &[Primitive], rng: ChaCha8Rng) -> Result<Injection> {
    let mut inj = Injector {
        model,
        prefix,
        rng,
        out: Injection {
            params: Vec::new(),
            hooks: model.hooks.clone(),
            unfrozen: Vec::new(),
        },
    };
    for p in prims {
        match p {
            Primitive::Selective(s) => inj.selective(s)?,
            Primitive::LowRank(s) => inj.low_rank(s)?,
            Primitive::Rescale(s) => inj.rescale(s)?,
            Primitive::Bottleneck(s) => inj.bottleneck(s)?,
            Primitive::Prompt(s) => inj.prompt(s)?,
            Primitive::PTuning(s) => inj.ptuning(s)?,
            Primitive::Prefix(s) => inj.prefix(s)?,
        }
    }
    Ok(inj.out)
}

impl Injector<'_> {
    fn add(&mut self, local: &str, tensor: Tensor) -> Result<String> {
        let name = format!("{}{local}", self.prefix);
        if self.model.params.contains(&name) || self.out.params.iter().any(|(n, _)| *n == name) {
            return Err(config_err(format!("injected parameter '{name}' already exists")));
        }
        self.out.params.push((name.clone(), tensor));
        Ok(name)
    }

    fn randn(&mut self, shape: &[usize]) -> Tensor {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut self.rng)).collect()).expect("positive")
    }

    fn mlp(&mut self, local: &str, input: usize, hidden: usize, output: usize) -> Result<MlpHook> {
        let w1 = self.randn(&[hidden, input]);
        let w2 = self.randn(&[output, hidden]);
        Ok(MlpHook {
            w1: self.add(&format!("{local}.0.weight"), w1)?,
            b1: self.add(&format!("{local}.0.bias"), Tensor::zeros(&[hidden]))?,
            w2: self.add(&format!("{local}.1.weight"), w2)?,
            b2: self.add(&format!("{local}.1.bias"), Tensor::zeros(&[output]))?,
        })
    }

    fn selective(&mut self, s: &SelectivePattern) -> Result<()> {
        let matched: Vec<String> = self
            .model
            .params
            .names()
            .filter(|n| s.matches(n))
            .map(String::from)
            .collect();
        if matched.is_empty() {
            return Err(config_err(format!(
                "unfreeze patterns [{}] match no parameter",
                s.unfreeze_patterns.join(", ")
            )));
        }
        for name in matched {
            if !self.out.unfrozen.contains(&name) {
                self.out.unfrozen.push(name);
            }
        }
        Ok(())
    }

    fn low_rank(&mut self, s: &LoraSettings) -> Result<()> {
        let spec = self.model.spec().clone();
        for site in s.resolve_sites(&spec)? {
            let (input, output) = (spec.site_input_width(&site).unwrap(), spec.site_width(&site).unwrap());
            let a = self.randn(&[s.r, input]);
            let a = self.add(&format!("{site}.A"), a)?;
            let b = self.add(&format!("{site}.B"), Tensor::zeros(&[output, s.r]))?;
            self.out.hooks.sites.entry(site).or_default().push(SiteHook::LowRank {
                a,
                b,
                scaling: s.scaling(),
            });
        }
        Ok(())
    }

    fn rescale(&mut self, s: &IA3Settings) -> Result<()> {
        let spec = self.model.spec().clone();
        for site in s.resolve_sites(&spec)? {
            let width = spec.site_width(&site).unwrap();
            let vector = self.add(&format!("{site}.scale"), Tensor::ones(&[width]))?;
            self.out.hooks.sites.entry(site).or_default().push(SiteHook::Rescale { vector });
        }
        Ok(())
    }

    fn bottleneck(&mut self, s: &BottleneckSettings) -> Result<()> {
        use crate::model::Placement;
        let (d, b) = (self.model.spec().d_model, s.bottleneck_dim);
        let sublayers: &[&str] = match s.placement {
            Placement::Sequential => &["attn", "ffn"],
            Placement::Parallel => &["ffn"],
        };
        for l in 0..self.model.spec().n_layers {
            for sub in sublayers {
                let key = format!("layers.{l}.{sub}");
                let tag = match s.placement {
                    Placement::Sequential => "",
                    Placement::Parallel => ".parallel",
                };
                let down = self.randn(&[b, d]);
                let hook = AdapterHook {
                    placement: s.placement,
                    down_w: self.add(&format!("{key}{tag}.down.weight"), down)?,
                    down_b: self.add(&format!("{key}{tag}.down.bias"), Tensor::zeros(&[b]))?,
                    up_w: self.add(&format!("{key}{tag}.up.weight"), Tensor::zeros(&[d, b]))?,
                    up_b: self.add(&format!("{key}{tag}.up.bias"), Tensor::zeros(&[d]))?,
                };
                self.out.hooks.adapters.entry(key).or_default().push(hook);
            }
        }
        Ok(())
    }

    fn check_virtual_budget(&self, n: usize) -> Result<()> {
        if self.out.hooks.prompt.is_some() {
            return Err(Error::State("a virtual-token block is already attached".into()));
        }
        let max_seq = self.model.spec().max_seq;
        if n >= max_seq {
            return Err(config_err(format!(
                "{n} virtual tokens leave no room for input within max_seq {max_seq}"
            )));
        }
        Ok(())
    }

    fn prompt(&mut self, s: &PromptSettings) -> Result<()> {
        let n = s.num_virtual_tokens;
        self.check_virtual_budget(n)?;
        let d = self.model.spec().d_model;
        let table = match s.init {
            PromptInit::Random => self.randn(&[n, d]),
            PromptInit::VocabSample => {
                let emb = self.model.params.expect("tok_emb.weight")?;
                let vocab = emb.shape()[0];
                let rows: Vec<usize> = if n <= vocab {
                    sample(&mut self.rng, vocab, n).into_vec()
                } else {
                    use rand::Rng;
                    (0..n).map(|_| self.rng.random_range(0..vocab)).collect()
                };
                let data = rows.iter().flat_map(|&r| emb.row(r).iter().copied()).collect();
                Tensor::new(vec![n, d], data)?
            }
        };
        let table = self.add("embedding", table)?;
        self.out.hooks.prompt = Some(PromptHook::Direct { table });
        Ok(())
    }

    fn ptuning(&mut self, s: &PTuningSettings) -> Result<()> {
        let n = s.num_virtual_tokens;
        self.check_virtual_budget(n)?;
        let d = self.model.spec().d_model;
        let seed = self.randn(&[n, d]);
        let seed = self.add("seed", seed)?;
        let mlp = self.mlp("encoder", d, s.encoder_hidden, d)?;
        self.out.hooks.prompt = Some(PromptHook::Encoded { seed, mlp });
        Ok(())
    }

    fn prefix(&mut self, s: &PrefixSettings) -> Result<()> {
        if self.out.hooks.kv_prefix.is_some() {
            return Err(Error::State("a key/value prefix is already attached".into()));
        }
        let (l_count, d, p) = (self.model.spec().n_layers, self.model.spec().d_model, s.prefix_len);
        let hook = match s.reparam {
            PrefixReparam::Flat => {
                let mut keys = Vec::with_capacity(l_count);
                let mut values = Vec::with_capacity(l_count);
                for l in 0..l_count {
                    let k = self.randn(&[p, d]);
                    keys.push(self.add(&format!("layers.{l}.key"), k)?);
                    let v = self.randn(&[p, d]);
                    values.push(self.add(&format!("layers.{l}.value"), v)?);
                }
                KvPrefixHook::Flat { keys, values }
            }
            PrefixReparam::Mlp => {
                let seed = self.randn(&[p, d]);
                let seed = self.add("seed", seed)?;
                let mlp = self.mlp("encoder", d, s.mlp_hidden, 2 * l_count * d)?;
                KvPrefixHook::Mlp { seed, mlp }
            }
        };
        self.out.hooks.kv_prefix = Some(hook);
        Ok(())
    }
}
