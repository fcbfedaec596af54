use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "
model: reference
method:
  peft_type: bitfit
dataset:
  name: copy
train:
  steps: 3
  seed: 7
eval:
  max_new_tokens: 4
output_dir: out
";

fn pf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pf"))
        .args(args)
        .current_dir(dir)
        .env_remove("PEFT_DIR")
        .env_remove("PF_DATASETS")
        .env("RUST_LOG", "warn")
        .output()
        .expect("pf runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_top_level_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.yaml", &format!("{CONFIG}learning_rate: 1\n"));
    let out = pf(dir.path(), &["train", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("learning_rate"));
    assert!(!dir.path().join("out").exists(), "nothing is computed for an invalid config");
}

#[test]
fn unknown_hyperparameter_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG.replace("peft_type: bitfit", "peft_type: bitfit\n  hyperparameters:\n    rank: 4");
    let cfg = write_config(dir.path(), "c.yaml", &text);
    let out = pf(dir.path(), &["train", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("rank"));
}

#[test]
fn unknown_method_and_dataset_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.yaml", &CONFIG.replace("bitfit", "nope"));
    assert_eq!(pf(dir.path(), &["train", &cfg]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "d.yaml", &CONFIG.replace("name: copy", "name: nope"));
    assert_eq!(pf(dir.path(), &["train", &cfg]).status.code(), Some(2));
}

#[test]
fn malformed_dataset_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("rows.jsonl"), "{\"q\": \"a\", \"a\": \"b\"}\n{broken\n").unwrap();
    fs::write(
        dir.path().join("datasets.json"),
        r#"{"mine": {"source": "file:rows.jsonl", "columns": {"input_cols": ["q"], "output_col": "a"},
             "splits": {"train": 1, "test": 1}, "task_kind": "generation"}}"#,
    )
    .unwrap();
    let cfg = write_config(dir.path(), "c.yaml", &CONFIG.replace("name: copy", "name: mine"));
    let out = pf(dir.path(), &["train", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("line 2"));
}

#[test]
fn train_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.yaml", CONFIG);
    let out = pf(dir.path(), &["train", &cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("368 trainable"));
    for f in ["adapter.ckpt", "report.json"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f} missing");
    }
    let out = pf(dir.path(), &["predict", &cfg, "--checkpoint", "out/adapter.ckpt"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("out/predict_report.json").is_file());

    let other = write_config(dir.path(), "ia3.yaml", &CONFIG.replace("bitfit", "ia3"));
    let out = pf(dir.path(), &["predict", &other, "--checkpoint", "out/adapter.ckpt"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn methods_list_shows_builtins_and_plugins() {
    let dir = tempfile::tempdir().unwrap();
    let out = pf(dir.path(), &["methods", "list"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for m in [
        "lora",
        "prompt_tuning",
        "prefix_tuning",
        "p_tuning",
        "ia3",
        "bottleneck",
        "parallel_adapter",
        "bitfit",
        "lntuning",
    ] {
        assert!(text.lines().any(|l| l.starts_with(m)), "{m} not listed");
    }
    assert_eq!(text.lines().count(), 9);

    let plugin = dir.path().join("peft/biasonly");
    fs::create_dir_all(&plugin).unwrap();
    fs::write(
        plugin.join("manifest"),
        "[method]\npeft_type = \"biasonly\"\nfamily = \"selective\"\nprefix = \"biasonly.\"\n",
    )
    .unwrap();
    fs::write(plugin.join("impl"), "[[impl.primitive]]\nkind = \"selective\"\npatterns = [\"bias\"]\n").unwrap();
    let out = pf(dir.path(), &["methods", "list"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().any(|l| l.starts_with("biasonly") && l.contains("plugin")));
}

#[test]
fn datasets_list_shows_bundled_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let out = pf(dir.path(), &["datasets", "list"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for d in ["toy-sentiment", "parity", "copy", "toy-arith"] {
        assert!(text.lines().any(|l| l.starts_with(d)), "{d} not listed");
    }
}

#[test]
fn bench_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["bench".to_string()];
    for m in ["bitfit", "lntuning"] {
        let text = CONFIG
            .replace("bitfit", m)
            .replace("name: copy", "name: toy-sentiment")
            .replace("output_dir: out", &format!("output_dir: runs/{m}"));
        args.push(write_config(dir.path(), &format!("{m}.yaml"), &text));
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = pf(dir.path(), &args);
    assert!(out.status.success(), "{}", stderr(&out));
    let md = fs::read_to_string(dir.path().join("runs/bench.md")).unwrap();
    assert_eq!(md, stdout(&out));
    assert!(md.starts_with("| macro-F1 | toy-sentiment |"));
    assert_eq!(md.lines().count(), 4);
    assert!(dir.path().join("runs/bench.json").is_file());
}
