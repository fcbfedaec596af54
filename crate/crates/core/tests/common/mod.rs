#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use peftkit::data::{load_split, DatasetRegistry, Tokenizer};
use peftkit::model::{ModelSpec, TransformerModel};
use peftkit::numcore::{Tape, Tensor, Var, IGNORE_INDEX};
use peftkit::peft::{attach, parse_config, AttachHandle, MethodRegistry};
use peftkit::runner::ExperimentConfig;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Every built-in peft_type.
pub const METHODS: [&str; 9] = [
    "lora",
    "prompt_tuning",
    "prefix_tuning",
    "p_tuning",
    "ia3",
    "bottleneck",
    "parallel_adapter",
    "bitfit",
    "lntuning",
];

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative disagreement between backward() and FD.
pub const FD_TOL: f64 = 1e-6;
/// Smallest denominator, for gradients that are exactly zero.
pub const FD_FLOOR: f64 = 1e-6;

pub fn raw(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

pub fn attached(peft_type: &str, hp: &BTreeMap<String, String>, seed: u64) -> (TransformerModel, AttachHandle) {
    let registry = MethodRegistry::builtin();
    let mut model = TransformerModel::build(ModelSpec::reference(), seed).unwrap();
    let config = parse_config(&registry, peft_type, hp).unwrap();
    let handle = attach(&mut model, &registry, &config).unwrap();
    (model, handle)
}

/// Denominator floor for a loss of magnitude `loss`.
///
/// Evaluating the loss carries roundoff of about `eps * |loss|`, so a central
/// difference resolves gradients only down to `eps * |loss| / h`. Below that
/// scale relative error is meaningless; the floor turns the test into an
/// absolute one whose bound is exactly that resolution.
pub fn fd_floor(loss: f64) -> f64 {
    (loss.abs() * f64::EPSILON / FD_STEP / FD_TOL).max(FD_FLOOR)
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub coords: usize,
    pub worst: f64,
    /// (analytic, numeric) at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub floor: f64,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.coords >= 100 && self.worst <= FD_TOL
    }

    fn merge(&mut self, other: GradReport) {
        self.coords += other.coords;
        if other.worst >= self.worst {
            self.worst = other.worst;
            self.worst_pair = other.worst_pair;
        }
        self.floor = self.floor.max(other.floor);
    }
}

/// Picks `n` (tensor, offset) coordinates uniformly from the given sizes.
fn sample_coords(sizes: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<usize> = sample(rng, total, n.min(total)).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|mut flat| {
            let mut which = 0;
            while flat >= sizes[which] {
                flat -= sizes[which];
                which += 1;
            }
            (which, flat)
        })
        .collect()
}

/// Checks a graph of leaf inputs reduced to a scalar by `build`.
pub fn gradcheck_leaves(inputs: &[Tensor], n: usize, seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> GradReport {
    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(inputs);
    let grads = tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get(v).unwrap().to_vec()).collect();
    let floor = fd_floor(tape.value(out).data()[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (which, i) in sample_coords(&sizes, n, &mut rng) {
        let x0 = work[which].data()[i];
        work[which].data_mut()[i] = x0 + FD_STEP;
        let (t, _, o) = eval(&work);
        let plus = t.value(o).data()[0];
        work[which].data_mut()[i] = x0 - FD_STEP;
        let (t, _, o) = eval(&work);
        let minus = t.value(o).data()[0];
        work[which].data_mut()[i] = x0;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[which][i];
        report.merge(GradReport {
            coords: 1,
            worst: rel_err(a, numeric, floor),
            worst_pair: (a, numeric),
            floor,
        });
    }
    report
}

fn lm_loss(model: &TransformerModel, seqs: &[Vec<usize>]) -> f64 {
    seqs.iter().map(|s| lm_loss_one(model, s, None)).sum()
}

fn lm_loss_one(model: &TransformerModel, seq: &[usize], grads: Option<&mut TransformerModel>) -> f64 {
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, &seq[..seq.len() - 1]).unwrap();
    let mut targets = vec![IGNORE_INDEX; model.virtual_tokens()];
    targets.extend(&seq[1..]);
    let loss = tape.softmax_cross_entropy(logits, &targets).unwrap();
    let value = tape.value(loss).data()[0];
    if let Some(m) = grads {
        tape.backward_into(loss, &mut m.params).unwrap();
    }
    value
}

/// Moves every trainable coordinate off its initial value so that no
/// gradient path is trivially zero (e.g. LoRA's zero-initialized B).
pub fn perturb_trainable(model: &mut TransformerModel, handle: &AttachHandle, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for name in handle.trainable() {
        for x in model.params.get_mut(name).unwrap().data_mut() {
            *x += normal.sample(&mut rng);
        }
    }
}

/// Adds noise to every parameter, frozen or not. The reference init
/// (std 0.02) makes adapter gradients so small that FD roundoff dominates;
/// O(1) weights give a well-conditioned point to compare at.
pub fn perturb_all(model: &mut TransformerModel, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for (_, t) in model.params.iter_mut() {
        for x in t.data_mut() {
            *x += normal.sample(&mut rng);
        }
    }
}

/// FD check of the summed next-token loss over `seqs` on `n` sampled
/// trainable coordinates of an attached model.
pub fn gradcheck_model(model: &mut TransformerModel, handle: &AttachHandle, seqs: &[Vec<usize>], n: usize, seed: u64) -> GradReport {
    let names: Vec<String> = handle.trainable().map(str::to_string).collect();
    model.params.zero_grads();
    let snapshot = model.clone();
    for s in seqs {
        lm_loss_one(&snapshot, s, Some(model));
    }
    let analytic: Vec<Vec<f64>> = names
        .iter()
        .map(|n| model.params.get(n).unwrap().grad().expect("trainable tensor received a gradient").to_vec())
        .collect();
    model.params.zero_grads();
    let floor = fd_floor(lm_loss(model, seqs));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = names.iter().map(|n| model.params.get(n).unwrap().numel()).collect();
    let mut report = GradReport::default();
    for (which, i) in sample_coords(&sizes, n, &mut rng) {
        let name = &names[which];
        let x0 = model.params.get(name).unwrap().data()[i];
        model.params.get_mut(name).unwrap().data_mut()[i] = x0 + FD_STEP;
        let plus = lm_loss(model, seqs);
        model.params.get_mut(name).unwrap().data_mut()[i] = x0 - FD_STEP;
        let minus = lm_loss(model, seqs);
        model.params.get_mut(name).unwrap().data_mut()[i] = x0;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[which][i];
        report.merge(GradReport {
            coords: 1,
            worst: rel_err(a, numeric, floor),
            worst_pair: (a, numeric),
            floor,
        });
    }
    report
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let normal = Normal::new(0.0, 1.0).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

/// Reduces any output to a scalar through a fixed random weighting.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(randn(&shape, &mut ChaCha8Rng::seed_from_u64(seed)));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn check(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) -> (&'static str, GradReport) {
    (name, gradcheck_leaves(&inputs, 120, 11, build))
}

/// FD reports for every numcore primitive on random O(1) inputs.
pub fn primitive_gradchecks() -> Vec<(&'static str, GradReport)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut r = |s: &[usize]| randn(s, &mut rng);

    out.push(check("matmul", vec![r(&[10, 12]), r(&[12, 9])], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, y, 1)
    }));
    out.push(check("matmul_nt", vec![r(&[10, 12]), r(&[9, 12])], |t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        weighted_sum(t, y, 2)
    }));
    out.push(check("add", vec![r(&[10, 12]), r(&[10, 12])], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        weighted_sum(t, y, 3)
    }));
    out.push(check("add_row", vec![r(&[10, 12]), r(&[12])], |t, v| {
        let y = t.add_row(v[0], v[1]).unwrap();
        weighted_sum(t, y, 4)
    }));
    out.push(check("mul", vec![r(&[10, 12]), r(&[10, 12])], |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        weighted_sum(t, y, 5)
    }));
    out.push(check("mul_row", vec![r(&[10, 12]), r(&[12])], |t, v| {
        let y = t.mul_row(v[0], v[1]).unwrap();
        weighted_sum(t, y, 6)
    }));
    out.push(check("scale", vec![r(&[10, 12])], |t, v| {
        let y = t.scale(v[0], -1.7);
        weighted_sum(t, y, 7)
    }));
    out.push(check("gelu", vec![r(&[10, 12])], |t, v| {
        let y = t.gelu(v[0]);
        weighted_sum(t, y, 8)
    }));
    out.push(check("embedding", vec![r(&[12, 10])], |t, v| {
        let y = t.embedding(v[0], &[3, 0, 3, 11, 7, 7, 2]).unwrap();
        weighted_sum(t, y, 9)
    }));
    out.push(check("concat_rows", vec![r(&[6, 12]), r(&[4, 12])], |t, v| {
        let y = t.concat_rows(&[v[0], v[1]]).unwrap();
        weighted_sum(t, y, 10)
    }));
    out.push(check("slice_cols", vec![r(&[10, 12])], |t, v| {
        let y = t.slice_cols(v[0], 3, 6).unwrap();
        weighted_sum(t, y, 11)
    }));
    out.push(check("layer_norm", vec![r(&[10, 12]), r(&[12]), r(&[12])], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        weighted_sum(t, y, 12)
    }));
    out.push(check("causal_attention", vec![r(&[8, 12]), r(&[11, 12]), r(&[11, 12])], |t, v| {
        let y = t.causal_attention(v[0], v[1], v[2], 3).unwrap();
        weighted_sum(t, y, 13)
    }));
    out.push(check("softmax_cross_entropy", vec![r(&[10, 12])], |t, v| {
        t.softmax_cross_entropy(v[0], &[1, 0, 11, 4, usize::MAX, 4, 9, 2, usize::MAX, 7]).unwrap()
    }));
    out.push(check("sum", vec![r(&[10, 12])], |t, v| {
        let y = t.gelu(v[0]);
        t.sum(y)
    }));
    out
}

/// FD reports for one attached instance of every built-in method, on the
/// first four probe sequences at a perturbed (well-conditioned) point.
pub fn method_gradchecks() -> Vec<(&'static str, GradReport)> {
    let probe = probe_batch();
    METHODS
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let (mut model, handle) = attached(m, &raw(&[]), 3);
            perturb_all(&mut model, 0.3, i as u64);
            (*m, gradcheck_model(&mut model, &handle, &probe[..4], 100, 17 + i as u64))
        })
        .collect()
}

/// Sixteen fully encoded examples (eight copy, eight sentiment).
pub fn probe_batch() -> Vec<Vec<usize>> {
    let datasets = DatasetRegistry::bundled();
    let tok = Tokenizer::bundled();
    let mut out = Vec::new();
    for name in ["copy", "toy-sentiment"] {
        let examples = load_split(datasets.get(name).unwrap(), "test", 0).unwrap();
        out.extend(examples.iter().take(8).map(|e| tok.encode(e, 64).unwrap().ids));
    }
    out
}

pub fn probe_logits(model: &TransformerModel, probe: &[Vec<usize>]) -> Vec<Tensor> {
    probe.iter().map(|ids| model.logits(ids).unwrap()).collect()
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Loads a bundled config and redirects its output into `out`.
pub fn bundled_config(rel: &str, out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_path(&workspace_root().join("configs").join(rel)).unwrap();
    cfg.output_dir = out.join(cfg.output_dir.file_name().unwrap());
    cfg
}

/// Independent macro-F1: per class, count by direct enumeration over pairs.
pub fn brute_macro_f1(preds: &[String], golds: &[String], labels: &[String]) -> f64 {
    let mut f1s = Vec::new();
    for c in labels {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (p, g) in preds.iter().zip(golds) {
            match (p == c, g == c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                (false, false) => {}
            }
        }
        if tp + fp + fn_ > 0.0 {
            f1s.push(if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) });
        }
    }
    f1s.iter().sum::<f64>() / f1s.len() as f64
}

/// Three plugin directories: one valid, one missing its `impl`, one whose
/// peft_type collides with a built-in.
pub fn discovery_fixture(root: &std::path::Path) {
    let write = |dir: &str, file: &str, text: &str| {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(d.join(file), text).unwrap();
    };
    write(
        "bitfit_ext",
        "manifest",
        "[method]\npeft_type = \"bitfit_ext\"\nfamily = \"selective\"\nprefix = \"bitfit_ext.\"\n\n\
         [[hyperparameter]]\nname = \"patterns\"\nkind = \"pattern\"\ndefault = [\"attn.q.bias\", \"attn.k.bias\"]\n",
    );
    write("bitfit_ext", "impl", "[[impl.primitive]]\nkind = \"selective\"\npatterns = \"$patterns\"\n");
    write(
        "svft_stub",
        "manifest",
        "[method]\npeft_type = \"svft\"\nfamily = \"reparametrized\"\nprefix = \"svft.\"\n",
    );
    write(
        "lora_dup",
        "manifest",
        "[method]\npeft_type = \"lora\"\nfamily = \"reparametrized\"\nprefix = \"lora2.\"\n",
    );
    write("lora_dup", "impl", "[[impl.primitive]]\nkind = \"low_rank\"\ntargets = [\"attn.q\"]\nrank = 1\nalpha = 1.0\n");
}
