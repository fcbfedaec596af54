//! Dataset descriptors, two-column conversion, tokenization and the bundled corpora.

pub mod corpora;
mod tokenizer;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use corpora::Record;
pub use tokenizer::{Encoded, Tokenizer, BOS, EOS, NEWLINE_TOKEN, PAD, SEP, UNK_TOKEN};

use crate::error::{config_err, data_err, Error, Result};

/// Environment variable overriding the dataset registry file.
pub const DATASETS_ENV: &str = "PF_DATASETS";
pub const DEFAULT_DATASETS_FILE: &str = "./datasets.json";
/// Joiner placed between multiple input columns.
pub const COLUMN_JOINER: &str = " [SEP] ";
pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

/// One converted example in two-column form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Builtin(String),
    File(PathBuf),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Builtin(id) => write!(f, "builtin:{id}"),
            Source::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl TryFrom<String> for Source {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if let Some(id) = s.strip_prefix("builtin:") {
            Ok(Source::Builtin(id.to_string()))
        } else if let Some(p) = s.strip_prefix("file:") {
            Ok(Source::File(PathBuf::from(p)))
        } else {
            Err(format!("source '{s}' must start with 'builtin:' or 'file:'"))
        }
    }
}

impl From<Source> for String {
    fn from(s: Source) -> String {
        s.to_string()
    }
}

impl Serialize for Source {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Source::try_from(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub input_cols: Vec<String>,
    pub output_col: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Generation,
}

/// A split is either a record count (generated, or a consecutive slice of a
/// file source) or its own JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitDef {
    Size(usize),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    #[serde(default, skip_serializing)]
    pub name: String,
    pub source: Source,
    pub columns: ColumnMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_verbalizer: Option<IndexMap<String, String>>,
    pub splits: IndexMap<String, SplitDef>,
    pub task_kind: TaskKind,
    /// Directory relative file paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl DatasetDescriptor {
    pub fn validate(&self) -> Result<()> {
        let ctx = |m: String| config_err(format!("dataset '{}': {m}", self.name));
        if self.columns.input_cols.is_empty() {
            return Err(ctx("input_cols is empty".into()));
        }
        if self.columns.input_cols.contains(&self.columns.output_col) {
            return Err(ctx(format!("output_col '{}' is also an input column", self.columns.output_col)));
        }
        if let Some(v) = &self.label_verbalizer {
            let mut seen = std::collections::HashSet::new();
            for (raw, text) in v {
                if text.trim().is_empty() {
                    return Err(ctx(format!("verbalizer maps '{raw}' to empty text")));
                }
                if !seen.insert(text.trim().to_lowercase()) {
                    return Err(ctx(format!("verbalizer is not injective: '{text}' is used twice")));
                }
            }
        }
        if self.splits.is_empty() {
            return Err(ctx("no splits defined".into()));
        }
        for (name, def) in &self.splits {
            if !SPLITS.contains(&name.as_str()) {
                return Err(ctx(format!("unknown split '{name}'; expected one of {SPLITS:?}")));
            }
            if let (Source::Builtin(_), SplitDef::File(_)) = (&self.source, def) {
                return Err(ctx(format!("builtin split '{name}' must be a size")));
            }
        }
        if let Source::Builtin(id) = &self.source {
            if !corpora::IDS.contains(&id.as_str()) {
                return Err(ctx(format!("unknown builtin corpus '{id}'; available: {:?}", corpora::IDS)));
            }
        }
        Ok(())
    }

    /// Verbalized class texts, when the dataset defines a verbalizer.
    pub fn label_set(&self) -> Option<Vec<String>> {
        self.label_verbalizer.as_ref().map(|v| v.values().cloned().collect())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn cell_text(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Casts one raw record to an [`Example`]; `index` only labels errors.
pub fn convert(descriptor: &DatasetDescriptor, record: &Record, index: usize) -> Result<Example> {
    let column = |name: &str| -> Result<String> {
        let value = record
            .get(name)
            .ok_or_else(|| data_err(format!("record {index}: missing column '{name}'")))?;
        cell_text(value).ok_or_else(|| data_err(format!("record {index}: column '{name}' is not a scalar")))
    };
    let cols = descriptor
        .columns
        .input_cols
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let mut input = cols.join(COLUMN_JOINER);
    if let Some(instr) = &descriptor.instruction {
        input = format!("{instr}\n{input}");
    }
    let raw = column(&descriptor.columns.output_col)?;
    let output = match &descriptor.label_verbalizer {
        Some(v) => v
            .get(&raw)
            .cloned()
            .ok_or_else(|| data_err(format!("record {index}: label '{raw}' has no verbalization")))?,
        None => raw,
    };
    if input.trim().is_empty() || output.trim().is_empty() {
        return Err(data_err(format!("record {index}: empty input or output after conversion")));
    }
    Ok(Example { input, output })
}

fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line)
            .map_err(|e| data_err(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn raw_split(descriptor: &DatasetDescriptor, split: &str) -> Result<Vec<Record>> {
    let def = descriptor.splits.get(split).ok_or_else(|| {
        config_err(format!(
            "dataset '{}' has no split '{split}'; defined: [{}]",
            descriptor.name,
            descriptor.splits.keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })?;
    match (&descriptor.source, def) {
        (Source::Builtin(id), SplitDef::Size(n)) => corpora::generate(id, split, *n),
        (Source::Builtin(_), SplitDef::File(_)) => Err(config_err("builtin splits must be sizes")),
        (Source::File(_), SplitDef::File(p)) => read_jsonl(&descriptor.resolve(p)),
        (Source::File(p), SplitDef::Size(n)) => {
            let records = read_jsonl(&descriptor.resolve(p))?;
            let mut start = 0;
            for name in SPLITS {
                if name == split {
                    break;
                }
                if let Some(SplitDef::Size(k)) = descriptor.splits.get(name) {
                    start += k;
                }
            }
            if start + n > records.len() {
                return Err(data_err(format!(
                    "dataset '{}': split '{split}' needs records {start}..{} but the file has {}",
                    descriptor.name,
                    start + n,
                    records.len()
                )));
            }
            Ok(records[start..start + n].to_vec())
        }
    }
}

/// Loads and converts one split; the returned order is a seeded shuffle.
pub fn load_split(descriptor: &DatasetDescriptor, split: &str, seed: u64) -> Result<Vec<Example>> {
    let records = raw_split(descriptor, split)?;
    let mut examples = records
        .iter()
        .enumerate()
        .map(|(i, r)| convert(descriptor, r, i))
        .collect::<Result<Vec<_>>>()?;
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(examples)
}

fn verbalizer(pairs: &[(&str, &str)]) -> Option<IndexMap<String, String>> {
    Some(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
}

fn builtin(
    name: &str,
    inputs: &[&str],
    output: &str,
    verb: Option<IndexMap<String, String>>,
    sizes: [usize; 3],
    kind: TaskKind,
) -> DatasetDescriptor {
    DatasetDescriptor {
        name: name.into(),
        source: Source::Builtin(name.into()),
        columns: ColumnMap {
            input_cols: inputs.iter().map(|s| s.to_string()).collect(),
            output_col: output.into(),
        },
        instruction: None,
        label_verbalizer: verb,
        splits: SPLITS.iter().zip(sizes).map(|(s, n)| (s.to_string(), SplitDef::Size(n))).collect(),
        task_kind: kind,
        base_dir: None,
    }
}

/// Descriptors for the four bundled corpora.
pub fn bundled_descriptors() -> Vec<DatasetDescriptor> {
    let numbers: Vec<(String, &str)> = corpora::NUMBER_WORDS
        .iter()
        .enumerate()
        .map(|(i, w)| (i.to_string(), *w))
        .collect();
    let numbers: Vec<(&str, &str)> = numbers.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    vec![
        builtin(
            corpora::TOY_SENTIMENT,
            &["text"],
            "label",
            verbalizer(&[("0", "negative"), ("1", "positive")]),
            [200, 50, 50],
            TaskKind::Classification,
        ),
        builtin(
            corpora::PARITY,
            &["bits"],
            "label",
            verbalizer(&[("0", "even"), ("1", "odd")]),
            [256, 64, 64],
            TaskKind::Classification,
        ),
        builtin(corpora::COPY, &["span"], "echo", None, [200, 50, 50], TaskKind::Generation),
        builtin(
            corpora::TOY_ARITH,
            &["question"],
            "answer",
            verbalizer(&numbers),
            [160, 40, 40],
            TaskKind::Classification,
        ),
    ]
}

/// Datasets by name: the bundled corpora plus any from a registry file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRegistry {
    descriptors: IndexMap<String, DatasetDescriptor>,
}

impl Default for DatasetRegistry {
    fn default() -> Self {
        Self::bundled()
    }
}

impl DatasetRegistry {
    pub fn bundled() -> Self {
        Self {
            descriptors: bundled_descriptors().into_iter().map(|d| (d.name.clone(), d)).collect(),
        }
    }

    /// Adds every descriptor of a `datasets.json` file (name → descriptor).
    pub fn extend_from_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: IndexMap<String, DatasetDescriptor> =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf);
        for (name, mut d) in entries {
            if self.descriptors.contains_key(&name) {
                return Err(config_err(format!("{}: dataset '{name}' is already defined", path.display())));
            }
            d.name = name.clone();
            d.base_dir = base.clone();
            d.validate()?;
            self.descriptors.insert(name, d);
        }
        Ok(())
    }

    /// Bundled datasets plus `$PF_DATASETS`, or `./datasets.json` when present.
    pub fn from_env() -> Result<Self> {
        let mut reg = Self::bundled();
        match std::env::var_os(DATASETS_ENV) {
            Some(p) => reg.extend_from_file(Path::new(&p))?,
            None => {
                let p = Path::new(DEFAULT_DATASETS_FILE);
                if p.is_file() {
                    reg.extend_from_file(p)?;
                }
            }
        }
        Ok(reg)
    }

    pub fn get(&self, name: &str) -> Result<&DatasetDescriptor> {
        self.descriptors.get(name).ok_or_else(|| {
            config_err(format!(
                "unknown dataset '{name}'; available: [{}]",
                self.descriptors.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetDescriptor> {
        self.descriptors.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.descriptors.keys().map(String::as_str)
    }
}
