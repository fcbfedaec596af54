//! Experiment configs, training, greedy prediction and benchmarking.

mod bench;
mod config;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use bench::{bench, BenchCell, BenchTable};
pub use config::{DatasetConfig, EvalConfig, ExperimentConfig, MethodConfig, ModelChoice, TrainConfig};
pub use optim::{Optimizer, OptimizerHyper, OptimizerKind, Schedule};

use crate::data::{load_split, DatasetDescriptor, DatasetRegistry, Encoded, Example, TaskKind, Tokenizer, EOS};
use crate::error::{config_err, Error, Result};
use crate::metrics::{classification_scores, pscp, token_accuracy, MetricReport};
use crate::model::{ModelSpec, TransformerModel};
use crate::numcore::{memory, Tape, Tensor, IGNORE_INDEX};
use crate::peft::{self, attach, load_adapter, parse_config, save_adapter, AttachHandle, MethodRegistry, TunerConfig};

pub const REPORT_FILE: &str = "report.json";
pub const PREDICT_REPORT_FILE: &str = "predict_report.json";
pub const CHECKPOINT_FILE: &str = "adapter.ckpt";

/// Registries a run resolves names against.
#[derive(Clone, Debug)]
pub struct Env {
    pub methods: MethodRegistry,
    pub datasets: DatasetRegistry,
}

impl Env {
    pub fn builtin() -> Self {
        Self {
            methods: MethodRegistry::builtin(),
            datasets: DatasetRegistry::bundled(),
        }
    }

    /// Built-ins plus plugins from `$PEFT_DIR` and datasets from `$PF_DATASETS`.
    pub fn from_env() -> Result<Self> {
        Ok(Self {
            methods: peft::discover_from_env()?.registry,
            datasets: DatasetRegistry::from_env()?,
        })
    }
}

/// Measured inference cost for one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InferenceCost {
    pub time_per_example: f64,
    pub peak_memory_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub peft_type: String,
    pub dataset: String,
    pub config_fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_train_loss: Option<f64>,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub train_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_fingerprint: Option<String>,
    pub eval_fingerprint: String,
    pub splits: IndexMap<String, MetricReport>,
    pub inference: IndexMap<String, InferenceCost>,
}

impl RunReport {
    /// The report with wall-clock-dependent fields cleared.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.train_seconds = 0.0;
        for cost in r.inference.values_mut() {
            cost.time_per_example = 0.0;
        }
        for m in r.splits.values_mut() {
            m.pscp = None;
        }
        r
    }
}

/// A trained model with its attachment, as produced by [`train_session`].
#[derive(Clone, Debug)]
pub struct Session {
    pub model: TransformerModel,
    pub handle: AttachHandle,
    pub tokenizer: Tokenizer,
    pub descriptor: DatasetDescriptor,
    /// Frozen tensors as they were right after attach.
    pub frozen_snapshot: Vec<(String, Tensor)>,
}

/// One scheduled batch: indices into the loaded training split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Batch {
    pub epoch: usize,
    pub index: usize,
    pub examples: Vec<usize>,
}

/// Seeded batch order: every epoch reshuffles all examples and chunks them.
/// With `steps`, epochs repeat until that many batches exist.
pub fn batch_schedule(n: usize, batch_size: usize, seed: u64, steps: Option<usize>, epochs: Option<usize>) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut epoch = 0;
    loop {
        if epochs.is_some_and(|e| epoch >= e) {
            break;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (index, chunk) in order.chunks(batch_size).enumerate() {
            if steps.is_some_and(|s| out.len() >= s) {
                return out;
            }
            out.push(Batch {
                epoch,
                index,
                examples: chunk.to_vec(),
            });
        }
        epoch += 1;
    }
    out
}

pub fn batch_fingerprint(batch: &Batch) -> String {
    let mut h = Sha256::new();
    h.update((batch.epoch as u64).to_le_bytes());
    h.update((batch.index as u64).to_le_bytes());
    for &i in &batch.examples {
        h.update((i as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Hash over the whole schedule, in order.
pub fn schedule_fingerprint(batches: &[Batch]) -> String {
    let mut h = Sha256::new();
    for b in batches {
        h.update(batch_fingerprint(b).as_bytes());
    }
    hex::encode(h.finalize())
}

struct Prepared<'a> {
    spec: ModelSpec,
    tuner: TunerConfig,
    descriptor: &'a DatasetDescriptor,
    tokenizer: Tokenizer,
}

/// Resolves every name in `cfg`; fails before any compute.
fn prepare<'a>(cfg: &ExperimentConfig, env: &'a Env) -> Result<Prepared<'a>> {
    cfg.validate()?;
    let spec = cfg.model.resolve()?;
    let tuner = parse_config(&env.methods, &cfg.method.peft_type, &cfg.method.hyperparameters)?;
    let descriptor = env.datasets.get(&cfg.dataset.name)?;
    for split in std::iter::once(&cfg.dataset.train_split).chain(&cfg.dataset.eval_splits) {
        if !descriptor.splits.contains_key(split) {
            return Err(config_err(format!("dataset '{}' has no split '{split}'", descriptor.name)));
        }
    }
    let tokenizer = Tokenizer::bundled();
    if tokenizer.len() > spec.vocab_size {
        return Err(config_err(format!(
            "tokenizer needs {} ids but vocab_size is {}",
            tokenizer.len(),
            spec.vocab_size
        )));
    }
    Ok(Prepared {
        spec,
        tuner,
        descriptor,
        tokenizer,
    })
}

fn encode_all(tokenizer: &Tokenizer, model: &TransformerModel, examples: &[Example]) -> Result<Vec<Encoded>> {
    let budget = model.spec().max_seq.saturating_sub(model.virtual_tokens());
    examples.iter().map(|e| tokenizer.encode(e, budget)).collect()
}

/// Next-token targets for `ids[..n-1]`, with virtual positions ignored.
fn targets(enc: &Encoded, n_virtual: usize) -> Vec<usize> {
    let n = enc.ids.len();
    let mut t = vec![IGNORE_INDEX; n_virtual];
    t.extend((1..n).map(|i| if enc.mask[i] { enc.ids[i] } else { IGNORE_INDEX }));
    t
}

/// Mean next-token loss over a batch; gradients accumulate into the model.
fn batch_step(model: &mut TransformerModel, batch: &[&Encoded]) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let n_virtual = model.virtual_tokens();
    let mut total = 0.0;
    for enc in batch {
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &enc.ids[..enc.ids.len() - 1])?;
        let loss = tape.softmax_cross_entropy(logits, &targets(enc, n_virtual))?;
        let loss = tape.scale(loss, scale);
        total += tape.value(loss).data()[0];
        tape.backward_into(loss, &mut model.params)?;
    }
    Ok(total)
}

/// Trains without touching the filesystem.
pub fn train_session(cfg: &ExperimentConfig, env: &Env) -> Result<(Session, RunReport)> {
    let prep = prepare(cfg, env)?;
    let mut model = TransformerModel::build(prep.spec.clone(), cfg.train.seed)?;
    let handle = attach(&mut model, &env.methods, &prep.tuner)?;
    let frozen_snapshot: Vec<(String, Tensor)> = handle
        .frozen
        .iter()
        .map(|n| (n.clone(), model.params.get(n).expect("frozen name").clone()))
        .collect();

    let train = load_split(prep.descriptor, &cfg.dataset.train_split, cfg.train.seed)?;
    let encoded = encode_all(&prep.tokenizer, &model, &train)?;
    let t = &cfg.train;
    let schedule = batch_schedule(encoded.len(), t.batch_size, t.seed, t.steps, t.epochs);
    let mut optimizer = Optimizer::new(t.optimizer_hyper());
    let mut losses = Vec::with_capacity(schedule.len());

    let started = Instant::now();
    for (step, batch) in schedule.iter().enumerate() {
        log::debug!("step {step} epoch {} batch {} {}", batch.epoch, batch.index, batch_fingerprint(batch));
        let items: Vec<&Encoded> = batch.examples.iter().map(|&i| &encoded[i]).collect();
        model.params.zero_grads();
        let loss = batch_step(&mut model, &items)?;
        if !loss.is_finite() {
            return Err(Error::Runtime(format!("loss became {loss} at step {step}")));
        }
        optimizer.step(&mut model.params, t.schedule.lr(t.lr, step, t.warmup_steps, schedule.len()));
        losses.push(loss);
        if (step + 1) % 50 == 0 {
            log::info!("step {} loss {loss:.6}", step + 1);
        }
    }
    model.params.zero_grads();
    let train_seconds = started.elapsed().as_secs_f64();

    for (name, before) in &frozen_snapshot {
        if !model.params.get(name).is_some_and(|t| t.bit_eq(before)) {
            return Err(Error::State(format!("frozen parameter '{name}' changed during training")));
        }
    }

    let session = Session {
        model,
        handle,
        tokenizer: prep.tokenizer,
        descriptor: prep.descriptor.clone(),
        frozen_snapshot,
    };
    let mut report = evaluate_splits(&session, cfg)?;
    report.final_train_loss = losses.last().copied();
    report.steps = losses.len();
    report.losses = losses;
    report.train_seconds = train_seconds;
    report.batch_fingerprint = Some(schedule_fingerprint(&schedule));
    Ok((session, report))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains, then writes `adapter.ckpt` and `report.json` to `output_dir`.
pub fn train(cfg: &ExperimentConfig, env: &Env) -> Result<RunReport> {
    let (session, report) = train_session(cfg, env)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_adapter(&session.model, &session.handle, &dir.join(CHECKPOINT_FILE))?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Loads an adapter onto a freshly built model and evaluates it.
/// Writes `predict_report.json` to `output_dir`.
pub fn predict(cfg: &ExperimentConfig, checkpoint: &Path, env: &Env) -> Result<RunReport> {
    let prep = prepare(cfg, env)?;
    let stored = peft::read_adapter(checkpoint)?;
    if stored.config.peft_type != prep.tuner.peft_type {
        return Err(Error::Compatibility(format!(
            "checkpoint holds a '{}' adapter but the config asks for '{}'",
            stored.config.peft_type, prep.tuner.peft_type
        )));
    }
    let mut model = TransformerModel::build(prep.spec.clone(), cfg.train.seed)?;
    let handle = load_adapter(&mut model, &env.methods, checkpoint)?;
    let session = Session {
        model,
        handle,
        tokenizer: prep.tokenizer,
        descriptor: prep.descriptor.clone(),
        frozen_snapshot: Vec::new(),
    };
    let report = evaluate_splits(&session, cfg)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(PREDICT_REPORT_FILE), &report)?;
    Ok(report)
}

fn evaluate_splits(session: &Session, cfg: &ExperimentConfig) -> Result<RunReport> {
    let mut splits = IndexMap::new();
    let mut inference = IndexMap::new();
    let mut eval_hash = Sha256::new();
    for split in &cfg.dataset.eval_splits {
        let examples = load_split(&session.descriptor, split, cfg.train.seed)?;
        for e in &examples {
            eval_hash.update(e.input.as_bytes());
            eval_hash.update([0]);
            eval_hash.update(e.output.as_bytes());
            eval_hash.update([1]);
        }
        let (report, cost, _) = evaluate(session, &examples, &cfg.eval)?;
        splits.insert(split.clone(), report);
        inference.insert(split.clone(), cost);
    }
    Ok(RunReport {
        peft_type: session.handle.peft_type.clone(),
        dataset: session.descriptor.name.clone(),
        config_fingerprint: cfg.fingerprint(),
        final_train_loss: None,
        steps: 0,
        losses: Vec::new(),
        trainable_params: session.model.count_parameters(true),
        total_params: session.model.count_parameters(false),
        train_seconds: 0.0,
        batch_fingerprint: None,
        eval_fingerprint: hex::encode(eval_hash.finalize()),
        splits,
        inference,
    })
}

/// Teacher-forced argmax at every position of `enc.ids[..n-1]`, aligned with `enc.ids[1..]`.
pub fn teacher_forced_predictions(model: &TransformerModel, enc: &Encoded) -> Result<Vec<usize>> {
    let logits = model.logits(&enc.ids[..enc.ids.len() - 1])?;
    let v = model.virtual_tokens();
    Ok((v..logits.rows()).map(|r| logits.argmax_row(r)).collect())
}

/// Greedy continuation of `prompt` until EOS, `max_new_tokens`, or the sequence budget.
pub fn greedy_decode(model: &TransformerModel, prompt: &[usize], max_new_tokens: usize) -> Result<Vec<usize>> {
    let room = model.spec().max_seq.saturating_sub(model.virtual_tokens());
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new_tokens && ids.len() < room {
        let logits = model.logits(&ids)?;
        let next = logits.argmax_row(logits.rows() - 1);
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

/// Scores `examples`; also returns the decoded predictions.
pub fn evaluate(session: &Session, examples: &[Example], eval: &EvalConfig) -> Result<(MetricReport, InferenceCost, Vec<String>)> {
    let model = &session.model;
    let tok = &session.tokenizer;
    let encoded = encode_all(tok, model, examples)?;

    let (mut pred, mut gold, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for enc in &encoded {
        pred.extend(teacher_forced_predictions(model, enc)?);
        gold.extend(&enc.ids[1..]);
        mask.extend(&enc.mask[1..]);
    }
    let tok_acc = token_accuracy(&pred, &gold, &mask)?;

    let param_bytes: usize = model.params.iter().map(|(_, t)| t.numel() * std::mem::size_of::<f64>()).sum();
    memory::reset_peak();
    let started = Instant::now();
    let mut predictions = Vec::with_capacity(encoded.len());
    for (ex, enc) in examples.iter().zip(&encoded) {
        let prompt = &enc.ids[..enc.prompt_len()];
        let generated = greedy_decode(model, prompt, eval.max_new_tokens)?;
        log::trace!("{:?} -> {:?}", ex.input, tok.decode(&generated));
        predictions.push(tok.decode(&generated));
    }
    let cost = InferenceCost {
        time_per_example: started.elapsed().as_secs_f64() / examples.len().max(1) as f64,
        peak_memory_bytes: memory::peak_bytes() + param_bytes,
    };

    let mut report = MetricReport::new(examples.len(), tok_acc);
    if eval.compute_classification_metrics {
        let label_set = session.descriptor.label_set().or_else(|| {
            (session.descriptor.task_kind == TaskKind::Classification).then(|| {
                let mut l: Vec<String> = examples.iter().map(|e| e.output.clone()).collect();
                l.sort();
                l.dedup();
                l
            })
        });
        match label_set {
            Some(labels) => {
                let golds: Vec<String> = examples.iter().map(|e| e.output.clone()).collect();
                report = report.with_classification(classification_scores(&predictions, &golds, &labels)?);
            }
            None => log::warn!(
                "dataset '{}' is a generation task; classification metrics skipped",
                session.descriptor.name
            ),
        }
    }
    if eval.compute_pscp {
        let performance = report.macro_f1.unwrap_or(report.token_accuracy);
        report.pscp = Some(pscp(
            performance,
            model.count_parameters(true) as f64,
            cost.time_per_example,
            cost.peak_memory_bytes as f64,
            &eval.pscp_constants(),
        )?);
    }
    Ok((report, cost, predictions))
}

/// Default output location for `pf bench` tables.
pub fn bench_output_dir(configs: &[ExperimentConfig]) -> PathBuf {
    configs
        .first()
        .and_then(|c| c.output_dir.parent().map(Path::to_path_buf))
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."))
}
