use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use peftkit::data::{DatasetRegistry, SplitDef};
use peftkit::peft::discover_from_env;
use peftkit::runner::{self, bench_output_dir, Env, ExperimentConfig, RunReport};
use peftkit::Error;

#[derive(Parser)]
#[command(name = "pf", version, about = "Parameter-efficient fine-tuning on a tiny decoder-only transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an adapter and write adapter.ckpt and report.json to output_dir.
    Train { config: PathBuf },
    /// Load a trained adapter and evaluate it by greedy decoding.
    Predict {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run several configs and emit a methods x datasets table.
    Bench {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Directory for bench.md and bench.json; defaults to the parent of
        /// the first config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect the method registry.
    Methods {
        #[command(subcommand)]
        action: ListAction,
    },
    /// Inspect the dataset registry.
    Datasets {
        #[command(subcommand)]
        action: ListAction,
    },
}

#[derive(Subcommand)]
enum ListAction {
    List,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let report = runner::train(&cfg, &Env::from_env()?)?;
            summarize(&report, &cfg.output_dir);
        }
        Command::Predict { config, checkpoint } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let report = runner::predict(&cfg, &checkpoint, &Env::from_env()?)?;
            summarize(&report, &cfg.output_dir);
        }
        Command::Bench { configs, out } => {
            let configs = configs.iter().map(|p| ExperimentConfig::from_path(p)).collect::<Result<Vec<_>, _>>()?;
            let table = runner::bench(&configs, &Env::from_env()?)?;
            let dir = out.unwrap_or_else(|| bench_output_dir(&configs));
            table.write(&dir)?;
            print!("{}", table.markdown());
            for c in &table.cells {
                log::info!(
                    "{} / {}: batch fingerprint {}",
                    c.peft_type,
                    c.dataset,
                    c.batch_fingerprint.as_deref().unwrap_or("-")
                );
            }
            if table.failed() {
                eprintln!("error: at least one benchmark run failed; see {}", dir.join("bench.json").display());
                return Ok(ExitCode::from(4));
            }
        }
        Command::Methods { action: ListAction::List } => {
            let discovery = discover_from_env()?;
            for d in &discovery.skipped {
                eprintln!("skipped {}: {}", d.dir.display(), d.reason);
            }
            for m in discovery.registry.iter() {
                let hp: Vec<String> = m
                    .manifest
                    .hyperparameters
                    .iter()
                    .map(|h| format!("{}={}", h.name, h.default))
                    .collect();
                let origin = match &m.source {
                    Some(dir) => format!("plugin {}", dir.display()),
                    None => "builtin".to_string(),
                };
                println!("{:<20} {:<15} {:<32} {}", m.manifest.peft_type, m.manifest.family.to_string(), origin, hp.join(" "));
            }
        }
        Command::Datasets { action: ListAction::List } => {
            let registry = DatasetRegistry::from_env()?;
            for d in registry.iter() {
                let splits: Vec<String> = d
                    .splits
                    .iter()
                    .map(|(name, s)| match s {
                        SplitDef::Size(n) => format!("{name}={n}"),
                        SplitDef::File(p) => format!("{name}={}", p.display()),
                    })
                    .collect();
                let kind = serde_label(&d.task_kind);
                println!("{:<16} {:<16} {:<24} {}", d.name, kind, d.source.to_string(), splits.join(" "));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn serde_label<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn summarize(report: &RunReport, dir: &Path) {
    println!(
        "{} on {}: {} trainable of {} parameters, {} steps",
        report.peft_type, report.dataset, report.trainable_params, report.total_params, report.steps
    );
    if let Some(loss) = report.final_train_loss {
        println!("final train loss {loss:.6}");
    }
    for (split, m) in &report.splits {
        let f1 = m.macro_f1.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        println!("{split}: token accuracy {:.4}, macro-F1 {f1}", m.token_accuracy);
    }
    println!("outputs in {}", dir.display());
}
