//! Token accuracy, generation-based classification scores and PSCP.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};

/// Per-class confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassCounts {
    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// `2TP / (2TP + FP + FN)`; zero when the class never occurs.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        let tp = self.tp as f64;
        2.0 * tp / (2.0 * tp + self.fp as f64 + self.fn_ as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub invalid_rate: f64,
    pub counts: IndexMap<String, ClassCounts>,
}

pub fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Scores free-text predictions against gold labels.
///
/// A prediction that matches no label is invalid: it is wrong, adds an FN to
/// its gold class and an FP to no class. Macro-F1 averages over the labels
/// that occur in the golds or the valid predictions.
pub fn classification_scores(preds: &[String], golds: &[String], label_set: &[String]) -> Result<ClassificationScores> {
    if preds.len() != golds.len() {
        return Err(data_err(format!("{} predictions for {} gold labels", preds.len(), golds.len())));
    }
    if golds.is_empty() {
        return Err(data_err("no examples to score"));
    }
    if label_set.is_empty() {
        return Err(config_err("label set is empty"));
    }
    let mut counts: IndexMap<String, ClassCounts> =
        label_set.iter().map(|l| (normalize_label(l), ClassCounts::default())).collect();
    let (mut correct, mut invalid) = (0usize, 0usize);
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        let g = normalize_label(g);
        if !counts.contains_key(&g) {
            return Err(data_err(format!("gold label '{g}' at index {i} is not in the label set")));
        }
        let p = normalize_label(p);
        if !counts.contains_key(&p) {
            invalid += 1;
            counts[&g].fn_ += 1;
        } else if p == g {
            correct += 1;
            counts[&g].tp += 1;
        } else {
            counts[&p].fp += 1;
            counts[&g].fn_ += 1;
        }
    }
    let present: Vec<f64> = counts.values().filter(|c| !c.is_empty()).map(ClassCounts::f1).collect();
    let n = golds.len() as f64;
    Ok(ClassificationScores {
        accuracy: correct as f64 / n,
        macro_f1: present.iter().sum::<f64>() / present.len() as f64,
        invalid_rate: invalid as f64 / n,
        counts,
    })
}

/// Fraction of supervised positions whose prediction equals the gold id.
pub fn token_accuracy(pred: &[usize], gold: &[usize], mask: &[bool]) -> Result<f64> {
    if pred.len() != gold.len() || gold.len() != mask.len() {
        return Err(Error::Dimension(format!(
            "token_accuracy: lengths {} / {} / {} differ",
            pred.len(),
            gold.len(),
            mask.len()
        )));
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for ((p, g), &m) in pred.iter().zip(gold).zip(mask) {
        if m {
            total += 1;
            hits += usize::from(p == g);
        }
    }
    if total == 0 {
        return Err(data_err("token_accuracy: no supervised positions"));
    }
    Ok(hits as f64 / total as f64)
}

fn default_cp() -> f64 {
    1000.0
}
fn default_cf() -> f64 {
    0.01
}
fn default_cm() -> f64 {
    1e8
}
fn one() -> f64 {
    1.0
}

/// Reference constants (C) and importance exponents (β) for PSCP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PscpConstants {
    /// Trainable parameters.
    #[serde(rename = "pscp_cp", default = "default_cp")]
    pub c_p: f64,
    /// Inference seconds per example.
    #[serde(rename = "pscp_cf", default = "default_cf")]
    pub c_f: f64,
    /// Peak memory in bytes.
    #[serde(rename = "pscp_cm", default = "default_cm")]
    pub c_m: f64,
    #[serde(rename = "pscp_bp", default = "one")]
    pub b_p: f64,
    #[serde(rename = "pscp_bf", default = "one")]
    pub b_f: f64,
    #[serde(rename = "pscp_bm", default = "one")]
    pub b_m: f64,
}

impl Default for PscpConstants {
    fn default() -> Self {
        Self {
            c_p: default_cp(),
            c_f: default_cf(),
            c_m: default_cm(),
            b_p: 1.0,
            b_f: 1.0,
            b_m: 1.0,
        }
    }
}

impl PscpConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("pscp_cp", self.c_p), ("pscp_cf", self.c_f), ("pscp_cm", self.c_m)] {
            if !(c.is_finite() && c > 0.0) {
                return Err(config_err(format!("{name} must be a positive number, got {c}")));
            }
        }
        for (name, b) in [("pscp_bp", self.b_p), ("pscp_bf", self.b_f), ("pscp_bm", self.b_m)] {
            if !(b.is_finite() && b >= 0.0) {
                return Err(config_err(format!("{name} must be nonnegative, got {b}")));
            }
        }
        Ok(())
    }
}

/// `performance · Π_j (C_j / (C_j + x_j))^β_j` over parameters, time and memory.
pub fn pscp(performance: f64, trainable_params: f64, time_per_example: f64, peak_memory: f64, k: &PscpConstants) -> Result<f64> {
    k.validate()?;
    if !(0.0..=1.0).contains(&performance) {
        return Err(Error::Runtime(format!("pscp: performance {performance} is outside [0, 1]")));
    }
    let mut score = performance;
    for (c, x, b) in [
        (k.c_p, trainable_params, k.b_p),
        (k.c_f, time_per_example, k.b_f),
        (k.c_m, peak_memory, k.b_m),
    ] {
        if !(x.is_finite() && x >= 0.0) {
            return Err(Error::Runtime(format!("pscp: cost input {x} must be finite and nonnegative")));
        }
        score *= (c / (c + x)).powf(b);
    }
    Ok(score)
}

/// Evaluation results for one split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub examples: usize,
    pub token_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invalid_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pscp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<IndexMap<String, ClassCounts>>,
}

impl MetricReport {
    pub fn new(examples: usize, token_accuracy: f64) -> Self {
        Self {
            examples,
            token_accuracy,
            accuracy: None,
            macro_f1: None,
            invalid_rate: None,
            pscp: None,
            counts: None,
        }
    }

    pub fn with_classification(mut self, s: ClassificationScores) -> Self {
        self.accuracy = Some(s.accuracy);
        self.macro_f1 = Some(s.macro_f1);
        self.invalid_rate = Some(s.invalid_rate);
        self.counts = Some(s.counts);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn confusion_fixture() {
        let r = classification_scores(
            &s(&["pos", "pos", "neg", "<garbage>"]),
            &s(&["pos", "neg", "neg", "pos"]),
            &s(&["pos", "neg"]),
        )
        .unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert!((r.counts["pos"].f1() - 0.5).abs() < 1e-12);
        assert!((r.counts["neg"].f1() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.macro_f1 - 0.583_333_333_333).abs() < 1e-9);
        assert_eq!(r.invalid_rate, 0.25);
    }

    #[test]
    fn perfect_and_all_invalid() {
        let golds = s(&["a", "b", "a"]);
        let r = classification_scores(&golds, &golds, &s(&["a", "b", "c"])).unwrap();
        assert_eq!((r.accuracy, r.macro_f1, r.invalid_rate), (1.0, 1.0, 0.0));
        let r = classification_scores(&s(&["x", "", "?"]), &golds, &s(&["a", "b"])).unwrap();
        assert_eq!((r.accuracy, r.macro_f1, r.invalid_rate), (0.0, 0.0, 1.0));
    }

    #[test]
    fn predictions_are_normalized() {
        let r = classification_scores(&s(&["  Positive "]), &s(&["positive"]), &s(&["positive", "negative"])).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn gold_outside_label_set_is_data_error() {
        let err = classification_scores(&s(&["a"]), &s(&["z"]), &s(&["a"])).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn token_accuracy_counts_supervised_only() {
        assert_eq!(token_accuracy(&[1, 2, 3], &[1, 2, 3], &[true, true, true]).unwrap(), 1.0);
        assert_eq!(token_accuracy(&[1, 9, 3, 9], &[1, 2, 3, 4], &[true; 4]).unwrap(), 0.5);
        let base = token_accuracy(&[5, 2, 3], &[1, 2, 3], &[false, true, true]).unwrap();
        assert_eq!(token_accuracy(&[7, 2, 3], &[1, 2, 3], &[false, true, true]).unwrap(), base);
        assert!(token_accuracy(&[1], &[1], &[false]).is_err());
    }

    #[test]
    fn pscp_worked_examples() {
        let zero = PscpConstants { b_p: 0.0, b_f: 0.0, b_m: 0.0, ..Default::default() };
        assert_eq!(pscp(0.73, 1e6, 3.0, 1e12, &zero).unwrap(), 0.73);
        let only_p = PscpConstants { b_f: 0.0, b_m: 0.0, ..Default::default() };
        assert!((pscp(0.9, 1000.0, 0.5, 1e9, &only_p).unwrap() - 0.45).abs() < 1e-12);
        let double = PscpConstants { b_p: 2.0, ..only_p };
        assert!((pscp(0.9, 1000.0, 0.5, 1e9, &double).unwrap() - 0.225).abs() < 1e-12);
        let neg = PscpConstants { b_m: -1.0, ..Default::default() };
        assert!(matches!(pscp(0.9, 1.0, 1.0, 1.0, &neg), Err(Error::Config(_))));
    }

    #[test]
    fn constants_parse_from_config_keys() {
        let k: PscpConstants = serde_json::from_str(r#"{"pscp_cp": 50, "pscp_bm": 0}"#).unwrap();
        assert_eq!((k.c_p, k.b_m, k.c_f), (50.0, 0.0, 0.01));
    }
}
