use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{train, Env, ExperimentConfig};
use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchCell {
    pub peft_type: String,
    pub dataset: String,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pscp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_fingerprint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Methods × datasets results; rows and columns keep first-seen order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchTable {
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    pub compute_pscp: bool,
    pub cells: Vec<BenchCell>,
}

impl BenchTable {
    pub fn cell(&self, peft_type: &str, dataset: &str) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.peft_type == peft_type && c.dataset == dataset)
    }

    pub fn failed(&self) -> bool {
        self.cells.iter().any(|c| c.error.is_some())
    }

    fn table(&self, title: &str, value: impl Fn(&BenchCell) -> Option<f64>) -> String {
        let mut s = format!("| {title} |");
        for d in &self.datasets {
            let _ = write!(s, " {d} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(self.datasets.len()));
        s.push('\n');
        for m in &self.methods {
            let _ = write!(s, "| {m} |");
            for d in &self.datasets {
                let text = match self.cell(m, d) {
                    None => "-".to_string(),
                    Some(c) if c.error.is_some() => "failed".to_string(),
                    Some(c) => value(c).map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v)),
                };
                let _ = write!(s, " {text} |");
            }
            s.push('\n');
        }
        s
    }

    /// Macro-F1 (×100) table; deterministic for fixed seeds.
    pub fn f1_markdown(&self) -> String {
        self.table("macro-F1", |c| c.macro_f1)
    }

    /// PSCP (×100) table; depends on measured inference time.
    pub fn pscp_markdown(&self) -> String {
        self.table("PSCP", |c| c.pscp)
    }

    pub fn markdown(&self) -> String {
        let mut s = self.f1_markdown();
        if self.compute_pscp {
            s.push('\n');
            s.push_str(&self.pscp_markdown());
        }
        s
    }

    /// Writes `bench.md` and `bench.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let md = dir.join("bench.md");
        fs::write(&md, self.markdown()).map_err(|e| Error::io(&md, e))?;
        let json = dir.join("bench.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Runtime(e.to_string()))?;
        fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
    }
}

/// Trains and evaluates every config; the first eval split of each fills its cell.
/// A failing run marks its cell failed instead of aborting the table.
pub fn bench(configs: &[ExperimentConfig], env: &Env) -> Result<BenchTable> {
    let first = configs.first().ok_or_else(|| config_err("bench needs at least one config"))?;
    let flags = first.eval.flags();
    for c in configs {
        c.validate()?;
        if c.eval.flags() != flags {
            return Err(config_err(format!(
                "eval flags of {} / {} differ from {} / {}; a benchmark needs identical evaluation",
                c.method.peft_type, c.dataset.name, first.method.peft_type, first.dataset.name
            )));
        }
    }
    let mut table = BenchTable {
        methods: Vec::new(),
        datasets: Vec::new(),
        compute_pscp: flags.1,
        cells: Vec::new(),
    };
    for c in configs {
        let (m, d) = (&c.method.peft_type, &c.dataset.name);
        if !table.methods.contains(m) {
            table.methods.push(m.clone());
        }
        if !table.datasets.contains(d) {
            table.datasets.push(d.clone());
        }
        if table.cell(m, d).is_some() {
            return Err(config_err(format!("bench lists {m} on {d} twice")));
        }
        let split = c.dataset.eval_splits[0].clone();
        let cell = match train(c, env) {
            Ok(report) => {
                let metrics = &report.splits[&split];
                log::info!("bench {m} on {d}: macro-F1 {:?}", metrics.macro_f1);
                BenchCell {
                    peft_type: m.clone(),
                    dataset: d.clone(),
                    split,
                    macro_f1: metrics.macro_f1,
                    pscp: metrics.pscp,
                    batch_fingerprint: report.batch_fingerprint.clone(),
                    error: None,
                }
            }
            Err(e) => {
                log::error!("bench {m} on {d} failed: {e}");
                BenchCell {
                    peft_type: m.clone(),
                    dataset: d.clone(),
                    split,
                    macro_f1: None,
                    pscp: None,
                    batch_fingerprint: None,
                    error: Some(e.to_string()),
                }
            }
        };
        table.cells.push(cell);
    }
    Ok(table)
}
