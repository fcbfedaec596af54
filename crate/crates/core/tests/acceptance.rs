//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

mod common;

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use peftkit::methods::{expected_trainable, resolve_primitives};
use peftkit::metrics::{classification_scores, pscp, PscpConstants};
use peftkit::model::{ModelSpec, TransformerModel};
use peftkit::peft::{attach, discover_methods, load_adapter, merge, parse_config, read_adapter, save_adapter, scan_methods, MethodRegistry};
use peftkit::runner::{bench, train, train_session, Env, ExperimentConfig, RunReport, Session};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Run {
    name: String,
    session: Session,
    report: RunReport,
    took: Duration,
}

/// Every bundled copy and parity config, trained once and shared by the
/// criteria that inspect trained state.
struct Runs {
    copy: Vec<Run>,
    parity: Vec<Run>,
    failures: Vec<String>,
}

fn train_dir(dir: &str, out: &Path) -> (Vec<Run>, Vec<String>) {
    let env = Env::builtin();
    let mut files: Vec<_> = std::fs::read_dir(workspace_root().join("configs").join(dir))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    let (mut runs, mut failures) = (Vec::new(), Vec::new());
    for f in files {
        let cfg = bundled_config(&format!("{dir}/{f}"), &out.join(dir));
        let t = Instant::now();
        match train_session(&cfg, &env) {
            Ok((session, report)) => runs.push(Run { name: f.trim_end_matches(".yaml").to_string(), session, report, took: t.elapsed() }),
            Err(e) => failures.push(format!("{dir}/{f}: {e}")),
        }
    }
    (runs, failures)
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let reports: Vec<_> = primitive_gradchecks().into_iter().chain(method_gradchecks()).collect();
    let took = t.elapsed();
    let bad: Vec<_> = reports.iter().filter(|(_, r)| !r.ok()).map(|(n, r)| format!("{n} ({:.2e})", r.worst)).collect();
    let worst = reports.iter().map(|(_, r)| r.worst).fold(0.0, f64::max);
    let coords: usize = reports.iter().map(|(_, r)| r.coords).sum();
    ensure!(bad.is_empty(), "over tolerance: {}", bad.join(", "));
    ensure!(reports.len() == 15 + 9, "expected 24 checks, ran {}", reports.len());
    ensure!(took < Duration::from_secs(60), "took {:.1} s", took.as_secs_f64());
    Ok(format!("{} checks, {coords} coords, worst rel err {worst:.2e}, {:.1} s", reports.len(), took.as_secs_f64()))
}

fn frozen_invariance(runs: &Runs) -> Outcome {
    ensure!(runs.failures.is_empty(), "runs failed: {}", runs.failures.join("; "));
    let mut tensors = 0;
    for run in &runs.copy {
        ensure!(run.report.steps == 300, "{} ran {} steps", run.name, run.report.steps);
        ensure!(!run.session.frozen_snapshot.is_empty(), "{} froze nothing", run.name);
        for (name, before) in &run.session.frozen_snapshot {
            ensure!(run.session.model.params.get(name).unwrap().bit_eq(before), "{}: {name} moved", run.name);
            tensors += 1;
        }
    }
    ensure!(runs.copy.len() == 9, "{} copy configs", runs.copy.len());
    Ok(format!("9 methods x 300 steps, {tensors} frozen tensors bit-identical"))
}

fn identity_at_init() -> Outcome {
    let probe = probe_batch();
    let base = probe_logits(&TransformerModel::build(ModelSpec::reference(), 9).unwrap(), &probe);
    let cases: [(&str, &[(&str, &str)]); 6] = [
        ("lora", &[]),
        ("ia3", &[]),
        ("bottleneck", &[]),
        ("bottleneck", &[("placement", "parallel")]),
        ("bitfit", &[]),
        ("lntuning", &[]),
    ];
    for (m, hp) in cases {
        let (model, _) = attached(m, &raw(hp), 9);
        let same = probe_logits(&model, &probe).iter().zip(&base).all(|(a, b)| a.bit_eq(b));
        ensure!(same, "{m} {hp:?} changes logits");
    }
    Ok(format!("6 configurations bit-identical on {} probe sequences", probe.len()))
}

fn lora_merge(runs: &Runs) -> Outcome {
    let run = runs.copy.iter().find(|r| r.name == "lora").ok_or("no trained lora run")?;
    let probe = probe_batch();
    let adapted = probe_logits(&run.session.model, &probe);
    let mut merged = run.session.model.clone();
    merge(&mut merged, run.session.handle.clone()).map_err(|e| e.to_string())?;
    ensure!(merged.params.names().all(|n| !n.starts_with("lora.")), "lora tensors survive the merge");
    let worst = probe_logits(&merged, &probe).iter().zip(&adapted).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
    ensure!(worst <= 1e-10, "max abs diff {worst:.3e}");
    Ok(format!("max abs diff {worst:.2e} after 300 steps"))
}

fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let n_heads = *[1usize, 2, 4].choose(rng).unwrap();
    ModelSpec {
        n_layers: rng.random_range(1..=3),
        d_model: n_heads * rng.random_range(1..=4usize) * 2,
        n_heads,
        d_ff: rng.random_range(2..=48),
        tie_output_head: rng.random(),
        ..ModelSpec::reference()
    }
}

fn pick(rng: &mut ChaCha8Rng, from: &[&str]) -> String {
    let k = rng.random_range(1..=from.len());
    let mut chosen: Vec<&str> = from.choose_multiple(rng, k).copied().collect();
    chosen.sort_by_key(|s| from.iter().position(|f| f == s));
    chosen.join(",")
}

fn random_hyperparameters(method: &str, rng: &mut ChaCha8Rng) -> BTreeMap<String, String> {
    let n = |rng: &mut ChaCha8Rng, hi: usize| rng.random_range(1..=hi).to_string();
    let either = |rng: &mut ChaCha8Rng, a: &str, b: &str| if rng.random() { a } else { b }.to_string();
    let pairs: Vec<(&str, String)> = match method {
        "lora" => vec![
            ("r", n(rng, 8)),
            ("alpha", rng.random_range(0.5..32.0f64).to_string()),
            ("targets", pick(rng, &["attn.q", "attn.k", "attn.v", "attn.o", "ffn.up", "ffn.down"])),
        ],
        "prompt_tuning" => vec![("num_virtual_tokens", n(rng, 16)), ("init", either(rng, "random", "vocab_sample"))],
        "prefix_tuning" => vec![("prefix_len", n(rng, 16)), ("reparam", either(rng, "flat", "mlp")), ("mlp_hidden", n(rng, 48))],
        "p_tuning" => vec![("num_virtual_tokens", n(rng, 16)), ("encoder_hidden", n(rng, 48))],
        "ia3" => vec![],
        "bottleneck" => vec![("bottleneck_dim", n(rng, 32)), ("placement", either(rng, "sequential", "parallel"))],
        "parallel_adapter" => vec![("bottleneck_dim", n(rng, 32))],
        "bitfit" => vec![("patterns", pick(rng, &["bias", "beta", "gamma", "attn.q.bias"]))],
        "lntuning" => vec![("patterns", pick(rng, &["gamma", "beta", "ln_f.gamma"]))],
        other => panic!("no generator for {other}"),
    };
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn parameter_counts() -> Outcome {
    let base = TransformerModel::build(ModelSpec::reference(), 0).unwrap().count_parameters(false);
    ensure!(base == 8640, "base {base}");
    let expected: [(&str, &[(&str, &str)], usize); 10] = [
        ("lora", &[], 256),
        ("prompt_tuning", &[], 128),
        ("prefix_tuning", &[], 256),
        ("p_tuning", &[], 1200),
        ("ia3", &[], 192),
        ("bottleneck", &[], 592),
        ("bottleneck", &[("placement", "parallel")], 296),
        ("parallel_adapter", &[], 296),
        ("bitfit", &[], 368),
        ("lntuning", &[], 160),
    ];
    for (m, hp, want) in expected {
        let got = attached(m, &raw(hp), 0).0.count_parameters(true);
        ensure!(got == want, "{m} {hp:?}: {got} != {want}");
    }
    let registry = MethodRegistry::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for m in METHODS {
        for _ in 0..50 {
            let spec = random_spec(&mut rng);
            let hp = random_hyperparameters(m, &mut rng);
            let config = parse_config(&registry, m, &hp).map_err(|e| format!("{m} {hp:?}: {e}"))?;
            let prims = resolve_primitives(&registry.get(m).unwrap().implementation, &config).map_err(|e| e.to_string())?;
            let formula = expected_trainable(&prims, &spec).map_err(|e| e.to_string())?;
            let mut model = TransformerModel::build(spec.clone(), 0).unwrap();
            attach(&mut model, &registry, &config).map_err(|e| format!("{m} {hp:?} on {spec:?}: {e}"))?;
            let counted = model.count_parameters(true);
            ensure!(formula == counted, "{m} {hp:?} on {spec:?}: formula {formula} vs {counted}");
        }
    }
    Ok("base 8640 and 10 reference counts exact; 9 x 50 random draws agree".into())
}

fn discovery() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    discovery_fixture(dir.path());
    let scan = scan_methods(dir.path()).map_err(|e| e.to_string())?;
    ensure!(scan.registered == ["bitfit_ext"], "registered {:?}", scan.registered);
    ensure!(scan.skipped.len() == 1 && scan.skipped[0].dir.ends_with("svft_stub"), "skipped {:?}", scan.skipped);
    ensure!(scan.errors.len() == 1 && scan.errors[0].dir.ends_with("lora_dup"), "errors {:?}", scan.errors);
    let code = discover_methods(dir.path()).map(|_| 0).unwrap_or_else(|e| e.exit_code());
    ensure!(code == 2, "strict discovery exit code {code}");

    let empty = tempfile::tempdir().unwrap();
    let d = discover_methods(empty.path()).map_err(|e| e.to_string())?;
    ensure!(d.registered.is_empty() && d.skipped.is_empty(), "empty dir registered {:?}", d.registered);
    ensure!(d.registry == MethodRegistry::builtin(), "empty dir changed the registry");
    Ok(format!(
        "1 registered, 1 skipped ({}), 1 hard error (exit 2); empty dir gives {} built-ins",
        scan.skipped[0].reason,
        d.registry.len()
    ))
}

fn config_strictness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let yaml = |extra: &str, hp: &str| {
        format!(
            "model: reference\nmethod:\n  peft_type: lora\n  hyperparameters: {{{hp}}}\ndataset:\n  name: copy\n\
             train:\n  steps: 2\n  lr: 0.01\n  seed: 1\noutput_dir: {}\n{extra}",
            out.display()
        )
    };
    let env = Env::builtin();
    let run = |text: String| ExperimentConfig::from_yaml(&text).and_then(|cfg| train(&cfg, &env));

    let err = run(yaml("", "rank: 4")).err().ok_or("unknown hyperparameter accepted")?;
    ensure!(err.exit_code() == 2, "unknown hyperparameter exit {}: {err}", err.exit_code());
    let err2 = run(yaml("learning_rate: 0.1\n", "")).err().ok_or("unknown top-level key accepted")?;
    ensure!(err2.exit_code() == 2, "unknown top-level key exit {}: {err2}", err2.exit_code());
    ensure!(!out.exists(), "a rejected config produced output");

    let registry = MethodRegistry::builtin();
    for m in METHODS {
        let config = parse_config(&registry, m, &BTreeMap::new()).map_err(|e| e.to_string())?;
        for hp in &registry.get(m).unwrap().hyperparameters {
            ensure!(config.get(&hp.name) == Some(&hp.default), "{m}.{} does not take its default", hp.name);
        }
    }
    let lora = parse_config(&registry, "lora", &raw(&[("alpha", "8")])).unwrap();
    ensure!(lora.get("r").and_then(|v| v.as_int()) == Some(2), "lora r default");
    Ok("both rejections exit 2 before any output; omitted keys take manifest defaults for 9 methods".into())
}

fn learning_targets(runs: &Runs) -> Outcome {
    ensure!(runs.failures.is_empty(), "runs failed: {}", runs.failures.join("; "));
    let total: Duration = runs.copy.iter().chain(&runs.parity).map(|r| r.took).sum();
    let copy: Vec<(String, f64)> =
        runs.copy.iter().map(|r| (r.name.clone(), r.report.splits["train"].token_accuracy)).collect();
    let parity: Vec<(String, f64)> = runs
        .parity
        .iter()
        .map(|r| (r.name.clone(), r.report.splits["test"].accuracy.unwrap_or(f64::NAN)))
        .collect();
    let fmt = |v: &[(String, f64)]| v.iter().map(|(n, a)| format!("{n} {a:.3}")).collect::<Vec<_>>().join(", ");
    let detail = format!(
        "copy train token_acc [{}]; parity test acc [{}]; {:.0} s",
        fmt(&copy),
        fmt(&parity),
        total.as_secs_f64()
    );
    let ok = copy.len() == 9
        && parity.len() == 4
        && copy.iter().all(|(_, a)| *a >= 0.95)
        && parity.iter().all(|(_, a)| *a >= 0.90)
        && total < Duration::from_secs(600);
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn metrics_oracle() -> Outcome {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let r = classification_scores(&s(&["pos", "pos", "neg", "<garbage>"]), &s(&["pos", "neg", "neg", "pos"]), &s(&["pos", "neg"]))
        .map_err(|e| e.to_string())?;
    ensure!((r.macro_f1 - 0.58333).abs() <= 1e-5 && (r.macro_f1 - 7.0 / 12.0).abs() <= 1e-9, "fixture macro-F1 {}", r.macro_f1);
    ensure!(r.accuracy == 0.5, "fixture accuracy {}", r.accuracy);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=5);
        let n = rng.random_range(1..=50);
        let labels: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let name = |i: usize| if i < k { labels[i].clone() } else { format!("junk{i}") };
        let golds: Vec<String> = (0..n).map(|_| name(rng.random_range(0..k))).collect();
        let preds: Vec<String> = (0..n).map(|_| name(rng.random_range(0..k + 2))).collect();
        let got = classification_scores(&preds, &golds, &labels).map_err(|e| e.to_string())?;
        let diff = (got.macro_f1 - brute_macro_f1(&preds, &golds, &labels)).abs();
        ensure!(diff <= 1e-12, "instance {preds:?} / {golds:?}: off by {diff}");
        worst = worst.max(diff);
    }
    Ok(format!("fixture macro-F1 {:.5}, accuracy 0.5; 1000 random instances, worst diff {worst:.1e}", r.macro_f1))
}

fn pscp_behavior() -> Outcome {
    let zero = PscpConstants { b_p: 0.0, b_f: 0.0, b_m: 0.0, ..Default::default() };
    let only_p = PscpConstants { b_f: 0.0, b_m: 0.0, ..Default::default() };
    let double = PscpConstants { b_p: 2.0, ..only_p };
    let half = pscp(0.9, 1000.0, 0.5, 1e9, &only_p).map_err(|e| e.to_string())?;
    let quarter = pscp(0.9, 1000.0, 0.5, 1e9, &double).map_err(|e| e.to_string())?;
    ensure!((half - 0.45).abs() <= 1e-12, "0.45 example gives {half}");
    ensure!((quarter - 0.225).abs() <= 1e-12, "0.225 example gives {quarter}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let perf: f64 = rng.random();
        let (p, t, m) = (rng.random_range(0.0..1e7), rng.random_range(0.0..10.0), rng.random_range(0.0..1e10));
        let k = PscpConstants {
            b_p: rng.random_range(0.0..3.0),
            b_f: rng.random_range(0.0..3.0),
            b_m: rng.random_range(0.0..3.0),
            ..Default::default()
        };
        let score = |perf, p, t, m, k: &PscpConstants| pscp(perf, p, t, m, k).unwrap();
        let base = score(perf, p, t, m, &k);
        ensure!(score(perf, p, t, m, &zero) == perf, "beta=0 identity fails at {perf}");
        ensure!((0.0..=perf).contains(&base), "score {base} outside [0, {perf}]");
        let grow = rng.random_range(1.0..100.0);
        ensure!(score(perf, p * grow + 1.0, t, m, &k) <= base, "more parameters raised pscp");
        ensure!(score(perf, p, t * grow + 1e-3, m, &k) <= base, "more time raised pscp");
        ensure!(score(perf, p, t, m * grow + 1.0, &k) <= base, "more memory raised pscp");
        let better = perf + (1.0 - perf) * rng.random::<f64>();
        ensure!(score(better, p, t, m, &k) >= base, "better performance lowered pscp");
    }
    Ok(format!("identity holds; examples {half:.12} and {quarter:.12}; 1000 monotone draws"))
}

fn benchmark() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let env = Env::builtin();
    let mut files: Vec<_> = std::fs::read_dir(workspace_root().join("configs/bench"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    let table = |sub: &str| {
        let configs: Vec<_> = files.iter().map(|f| bundled_config(&format!("bench/{f}"), &dir.path().join(sub))).collect();
        bench(&configs, &env)
    };
    let a = table("a").map_err(|e| e.to_string())?;
    let b = table("b").map_err(|e| e.to_string())?;
    ensure!(!a.failed() && !b.failed(), "a bench cell failed");
    ensure!(a.methods.len() == 3 && a.datasets.len() == 2 && a.cells.len() == 6, "table is {}x{}", a.methods.len(), a.datasets.len());
    ensure!(a.f1_markdown() == b.f1_markdown(), "macro-F1 tables differ:\n{}\n{}", a.f1_markdown(), b.f1_markdown());
    for (x, y) in a.cells.iter().zip(&b.cells) {
        ensure!(x.macro_f1.map(f64::to_bits) == y.macro_f1.map(f64::to_bits), "{} / {} not bit-identical", x.peft_type, x.dataset);
    }
    for d in &a.datasets {
        let prints: Vec<_> = a.methods.iter().map(|m| a.cell(m, d).unwrap().batch_fingerprint.clone()).collect();
        ensure!(prints[0].is_some() && prints.iter().all(|p| *p == prints[0]), "{d}: fingerprints {prints:?}");
    }
    let cells: Vec<String> = a
        .cells
        .iter()
        .map(|c| format!("{}/{} {:.2}", c.peft_type, c.dataset, 100.0 * c.macro_f1.unwrap_or(f64::NAN)))
        .collect();
    Ok(format!("3x2 table identical over two runs, one fingerprint per dataset; {}", cells.join(", ")))
}

fn checkpoint_round_trip(runs: &Runs) -> Outcome {
    ensure!(runs.copy.len() == 9, "{} trained copy runs", runs.copy.len());
    let dir = tempfile::tempdir().unwrap();
    let probe = probe_batch();
    let registry = MethodRegistry::builtin();
    for run in &runs.copy {
        let path = dir.path().join(format!("{}.ckpt", run.name));
        save_adapter(&run.session.model, &run.session.handle, &path).map_err(|e| e.to_string())?;
        let stored = read_adapter(&path).map_err(|e| e.to_string())?;
        let leaked: Vec<_> = stored.tensors.iter().map(|(n, _)| n).filter(|n| run.session.handle.frozen.contains(*n)).collect();
        ensure!(leaked.is_empty(), "{}: frozen tensors in checkpoint {leaked:?}", run.name);
        let mut fresh = TransformerModel::build(ModelSpec::reference(), 1).unwrap();
        load_adapter(&mut fresh, &registry, &path).map_err(|e| format!("{}: {e}", run.name))?;
        let same = probe_logits(&fresh, &probe).iter().zip(probe_logits(&run.session.model, &probe).iter()).all(|(a, b)| a.bit_eq(b));
        ensure!(same, "{}: reloaded logits differ", run.name);
    }
    Ok("9 trained adapters reload bit-identically; no frozen base tensor stored".into())
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().unwrap();
    let trained = OnceCell::new();
    let runs = || -> &Runs {
        trained.get_or_init(|| {
            let (copy, mut failures) = train_dir("copy", scratch.path());
            let (parity, more) = train_dir("parity", scratch.path());
            failures.extend(more);
            Runs { copy, parity, failures }
        })
    };

    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut check = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panicked".into()))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} {tag} {name}: {detail}");
        results.push((id, name, outcome));
    };

    check(1, "gradient suite", &mut gradients);
    check(2, "frozen-base invariance", &mut || frozen_invariance(runs()));
    check(3, "identity at init", &mut identity_at_init);
    check(4, "lora merge equivalence", &mut || lora_merge(runs()));
    check(5, "parameter-count oracle", &mut parameter_counts);
    check(6, "discovery conformance", &mut discovery);
    check(7, "config strictness", &mut config_strictness);
    check(8, "learning targets", &mut || learning_targets(runs()));
    check(9, "metrics oracle", &mut metrics_oracle);
    check(10, "pscp behavior", &mut pscp_behavior);
    check(11, "benchmark workflow", &mut benchmark);
    check(12, "checkpoint round trip", &mut || checkpoint_round_trip(runs()));

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
