//! Answer normalization, confusion-matrix metrics, and error-cause tagging.
//!
//! Accuracy is the exact normalized match rate. Recall and F1 are
//! macro-averaged over the classes present in the gold labels (recall is
//! reported macro-averaged by convention; this is a documented choice, not
//! something the class definitions force). The weighted F1 weights each
//! class by its gold support. Predictions that match no vocabulary label
//! count as wrong everywhere: a false negative for the gold class and a
//! false positive for none.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{classify_question, normalize_label, DatasetId, LabelVocab, QuestionType};
use crate::pipeline::Prediction;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty prediction set")]
    Empty,
    #[error("gold answer {answer:?} of sample {sample} is not in the label vocabulary")]
    GoldOutsideVocab { sample: String, answer: String },
}

/// Gold-by-predicted counts over the vocabulary, with one extra column for
/// predictions that match no label.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    /// counts[gold][pred]; the last column is the unmatched bucket.
    counts: Vec<Vec<u64>>,
    total: u64,
}

impl ConfusionMatrix {
    pub fn new(vocab: &LabelVocab) -> Self {
        let labels: Vec<String> = vocab.labels().iter().map(|l| l.to_string()).collect();
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n + 1]; n],
            total: 0,
        }
    }

    pub fn record(&mut self, gold_idx: usize, pred_idx: Option<usize>) {
        let col = pred_idx.unwrap_or(self.labels.len());
        self.counts[gold_idx][col] += 1;
        self.total += 1;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn unmatched(&self) -> u64 {
        self.counts.iter().map(|row| row[self.labels.len()]).sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|row| row[j]).sum()
    }

    /// (precision, recall, f1, support) for one class.
    pub fn class_metrics(&self, i: usize) -> (f64, f64, f64, u64) {
        let tp = self.counts[i][i] as f64;
        let support = self.row_sum(i);
        let fp = self.col_sum(i) as f64 - tp;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if support > 0 {
            tp / support as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (precision, recall, f1, support)
    }

    /// Accuracy, macro recall, macro F1, weighted F1 — macros averaged over
    /// classes present in the gold labels only.
    pub fn summary(&self) -> MetricTuple {
        let present: Vec<usize> = (0..self.labels.len())
            .filter(|&i| self.row_sum(i) > 0)
            .collect();
        let mut macro_recall = 0.0;
        let mut macro_f1 = 0.0;
        let mut weighted_f1 = 0.0;
        let mut support_total = 0u64;
        for &i in &present {
            let (_, recall, f1, support) = self.class_metrics(i);
            macro_recall += recall;
            macro_f1 += f1;
            weighted_f1 += f1 * support as f64;
            support_total += support;
        }
        let k = present.len() as f64;
        MetricTuple {
            accuracy: if self.total > 0 {
                self.trace() as f64 / self.total as f64
            } else {
                0.0
            },
            macro_recall: if k > 0.0 { macro_recall / k } else { 0.0 },
            macro_f1: if k > 0.0 { macro_f1 / k } else { 0.0 },
            weighted_f1: if support_total > 0 {
                weighted_f1 / support_total as f64
            } else {
                0.0
            },
            count: self.total,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTuple {
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub count: u64,
}

/// Counts of the diagnostic error causes. A wrong prediction is
/// `wrong_dm` when the gold label is absent from the generated direct
/// memory; otherwise `wrong_im` when the answer copies a hint that appears
/// only in the selected indirect memory; anything else is `other`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCauses {
    pub wrong_dm: u64,
    pub wrong_im: u64,
    pub other: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub total: u64,
    pub unmatched_count: u64,
    pub per_type: BTreeMap<QuestionType, MetricTuple>,
    pub error_causes: ErrorCauses,
}

/// Map model text to a canonical label. Trim, casefold, underscores to
/// spaces, collapse whitespace, then exact match; anything else is
/// unmatched.
pub fn normalize_answer(text: &str, vocab: &LabelVocab) -> Option<&'static str> {
    vocab.normalize(text)
}

/// Score a prediction set against its gold labels.
pub fn evaluate(
    preds: &[Prediction],
    vocab: &LabelVocab,
    dataset: DatasetId,
) -> Result<MetricsReport, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut matrix = ConfusionMatrix::new(vocab);
    let mut by_type: BTreeMap<QuestionType, ConfusionMatrix> = BTreeMap::new();
    for pred in preds {
        let gold_idx = vocab
            .index_of(&pred.gold)
            .ok_or_else(|| EvalError::GoldOutsideVocab {
                sample: format!("{}/{}", pred.video, pred.frame),
                answer: pred.gold.clone(),
            })?;
        let pred_idx = vocab.index_of(&pred.answer_text);
        matrix.record(gold_idx, pred_idx);
        by_type
            .entry(classify_question(&pred.question, dataset))
            .or_insert_with(|| ConfusionMatrix::new(vocab))
            .record(gold_idx, pred_idx);
    }
    let summary = matrix.summary();
    Ok(MetricsReport {
        accuracy: summary.accuracy,
        macro_recall: summary.macro_recall,
        macro_f1: summary.macro_f1,
        weighted_f1: summary.weighted_f1,
        total: matrix.total(),
        unmatched_count: matrix.unmatched(),
        per_type: by_type.into_iter().map(|(t, m)| (t, m.summary())).collect(),
        error_causes: classify_errors(preds, vocab),
    })
}

/// Tag each wrong prediction with its likeliest memory-related cause.
/// These are diagnostic heuristics over the recorded traces.
pub fn classify_errors(preds: &[Prediction], vocab: &LabelVocab) -> ErrorCauses {
    let mut causes = ErrorCauses::default();
    for pred in preds {
        let gold_label = vocab.normalize(&pred.gold);
        let pred_label = normalize_answer(&pred.answer_text, vocab);
        if pred_label.is_some() && pred_label == gold_label {
            continue;
        }
        let norm = |s: &str| normalize_label(s);
        let dm_hints: Vec<String> = pred.dm_hints().iter().map(|h| norm(h)).collect();
        let gold_in_dm = gold_label
            .map(|g| dm_hints.contains(&norm(g)))
            .unwrap_or(false);
        if !gold_in_dm {
            causes.wrong_dm += 1;
            continue;
        }
        let answer_norm = norm(&pred.answer_text);
        let in_im = pred.im_selected_hints().any(|h| norm(&h) == answer_norm);
        let in_dm = dm_hints.contains(&answer_norm);
        if in_im && !in_dm {
            causes.wrong_im += 1;
        } else {
            causes.other += 1;
        }
    }
    causes
}
