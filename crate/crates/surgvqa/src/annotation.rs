//! Ground-truth memory construction from the training split.
//!
//! Direct memory pairs a question with a short hint list: the most frequent
//! training answers for that question plus the gold answer. Indirect memory
//! collects, per frame, the question-hint pairs whose question is frequent
//! enough globally, ordered by that frequency. Both serialize in the
//! `Question [Hints]` text form used by the prompt templates.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    classify_question, normalize_question, DatasetId, FrameKey, QuestionType, SampleSet, Split,
};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("question {0:?} is not in the frequency table and no gold answer was provided")]
    UnknownQuestion(String),
    #[error("frequency table built from a non-training split")]
    NotTrainSplit,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
}

/// The sentinel hint rendered for questions excluded from hint generation.
pub const NULL_SENTINEL: &str = "NULL";

/// Ordered, deduplicated candidate answers for one question.
///
/// Serializes as a plain JSON string array; the null sentinel round-trips
/// as `["NULL"]`, mirroring its bracketed text form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HintSet {
    labels: Vec<String>,
    null_sentinel: bool,
}

impl Serialize for HintSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.null_sentinel {
            return vec![NULL_SENTINEL].serialize(serializer);
        }
        self.labels.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HintSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let labels = Vec::<String>::deserialize(deserializer)?;
        if labels.len() == 1 && labels[0] == NULL_SENTINEL {
            return Ok(HintSet::null());
        }
        Ok(HintSet::new(labels))
    }
}

impl HintSet {
    pub fn new(labels: Vec<String>) -> Self {
        let mut seen = Vec::new();
        for label in labels {
            if !seen.contains(&label) {
                seen.push(label);
            }
        }
        HintSet {
            labels: seen,
            null_sentinel: false,
        }
    }

    /// The `[NULL]` placeholder used where hint generation is skipped.
    pub fn null() -> Self {
        HintSet {
            labels: Vec::new(),
            null_sentinel: true,
        }
    }

    pub fn empty() -> Self {
        HintSet {
            labels: Vec::new(),
            null_sentinel: false,
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn is_null_sentinel(&self) -> bool {
        self.null_sentinel
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// Bracketed text form: `[h1, h2]`, or `[NULL]` for the sentinel.
    pub fn render(&self) -> String {
        if self.null_sentinel {
            return format!("[{NULL_SENTINEL}]");
        }
        format!("[{}]", self.labels.join(", "))
    }
}

impl fmt::Display for HintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// A question with its hint list, serialized `<question> [h1, h2]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectMemory {
    pub question: String,
    pub hints: HintSet,
}

impl DirectMemory {
    pub fn render(&self) -> String {
        format!("{} {}", self.question, self.hints.render())
    }
}

impl fmt::Display for DirectMemory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// One indirect-memory line: a scene question with its hints. Same text
/// form as [`DirectMemory`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndirectMemoryEntry {
    #[serde(rename = "q")]
    pub question: String,
    pub hints: HintSet,
}

impl IndirectMemoryEntry {
    pub fn render(&self) -> String {
        format!("{} {}", self.question, self.hints.render())
    }
}

impl fmt::Display for IndirectMemoryEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Per-question answer counts over the training split.
#[derive(Debug, Clone, Default)]
pub struct AnswerFrequencyTable {
    // question (normalized) -> answer -> count
    counts: HashMap<String, HashMap<String, u64>>,
}

impl AnswerFrequencyTable {
    pub fn answer_counts(&self, question: &str) -> Option<&HashMap<String, u64>> {
        self.counts.get(&normalize_question(question))
    }

    /// Number of training samples carrying this question text.
    pub fn question_frequency(&self, question: &str) -> u64 {
        self.answer_counts(question)
            .map(|m| m.values().sum())
            .unwrap_or(0)
    }

    pub fn distinct_answers(&self, question: &str) -> usize {
        self.answer_counts(question).map(HashMap::len).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Candidates for a question ranked by frequency descending, ties
    /// broken lexicographically on the label.
    pub fn ranked_candidates(&self, question: &str) -> Vec<(&str, u64)> {
        let mut out: Vec<(&str, u64)> = self
            .answer_counts(question)
            .map(|m| m.iter().map(|(a, &c)| (a.as_str(), c)).collect())
            .unwrap_or_default();
        out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        out
    }
}

/// Exact per-question answer counts over a training split.
pub fn build_frequency_table(train: &SampleSet) -> Result<AnswerFrequencyTable, AnnotationError> {
    if train.split != Split::Train {
        return Err(AnnotationError::NotTrainSplit);
    }
    let mut table = AnswerFrequencyTable::default();
    for sample in train.samples() {
        *table
            .counts
            .entry(normalize_question(&sample.question))
            .or_default()
            .entry(sample.answer.clone())
            .or_insert(0) += 1;
    }
    Ok(table)
}

/// Hint annotation for one question: the `k-1` most frequent candidates,
/// then the gold answer. A gold answer that already ranks in the top
/// candidates is not duplicated; the next distinct candidate backfills so
/// the set stays at `k` whenever enough distinct candidates exist.
pub fn annotate_direct_memory(
    question: &str,
    gold_answer: Option<&str>,
    table: &AnswerFrequencyTable,
    k: usize,
) -> Result<HintSet, AnnotationError> {
    let ranked = table.ranked_candidates(question);
    if ranked.is_empty() && gold_answer.is_none() {
        return Err(AnnotationError::UnknownQuestion(question.to_string()));
    }
    let mut hints: Vec<String> = Vec::new();
    for (label, _) in ranked.iter().take(k.saturating_sub(1)) {
        if !hints.iter().any(|h| h == label) {
            hints.push((*label).to_string());
        }
    }
    if let Some(gold) = gold_answer {
        if !hints.iter().any(|h| h == gold) {
            hints.push(gold.to_string());
        }
    }
    for (label, _) in &ranked {
        if hints.len() >= k {
            break;
        }
        if !hints.iter().any(|h| h == label) {
            hints.push((*label).to_string());
        }
    }
    Ok(HintSet::new(hints))
}

/// Dataset-scoped annotation exclusions.
///
/// Cholec80 binary questions carry only yes/no answers, so they are skipped
/// during hint generation and rendered as the `[NULL]` sentinel at
/// inference; Cholec80 questions with a single observed answer are dropped
/// from memory-augmented VQA training records.
#[derive(Debug, Clone, Copy)]
pub struct ExclusionRules {
    pub dataset: DatasetId,
}

impl ExclusionRules {
    pub fn for_dataset(dataset: DatasetId) -> Self {
        ExclusionRules { dataset }
    }

    /// Excluded from direct-memory hint annotation (and from the DM stage
    /// at inference, where the hint list becomes `[NULL]`).
    pub fn dm_excluded(&self, question: &str) -> bool {
        self.dataset == DatasetId::Cholec80
            && classify_question(question, self.dataset) == QuestionType::Binary
    }

    /// Excluded from memory-augmented VQA training records.
    pub fn mvqa_excluded(&self, question: &str, table: &AnswerFrequencyTable) -> bool {
        self.dataset == DatasetId::Cholec80 && table.distinct_answers(question) == 1
    }
}

/// Indices of the samples that remain eligible for hint annotation.
pub fn apply_annotation_exclusions(set: &SampleSet, dataset: DatasetId) -> Vec<usize> {
    let rules = ExclusionRules::for_dataset(dataset);
    set.samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| !rules.dm_excluded(&s.question))
        .map(|(i, _)| i)
        .collect()
}

/// Per-frame indirect memory, entries ordered by global question frequency
/// (descending, ties lexicographic on the question).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IndirectMemoryStore {
    frames: BTreeMap<FrameKey, Vec<IndirectMemoryEntry>>,
}

impl IndirectMemoryStore {
    pub fn entries(&self, key: &FrameKey) -> &[IndirectMemoryEntry] {
        self.frames.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn frames(&self) -> impl Iterator<Item = (&FrameKey, &[IndirectMemoryEntry])> {
        self.frames.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn insert(&mut self, key: FrameKey, entries: Vec<IndirectMemoryEntry>) {
        self.frames.insert(key, entries);
    }

    /// Newline-joined `Question [Hints]` lines for one frame.
    pub fn render_frame(&self, key: &FrameKey) -> String {
        self.entries(key)
            .iter()
            .map(IndirectMemoryEntry::render)
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// One JSON object per frame: `{"frame": "video/frame", "im": [...]}`.
    /// Frames are written in key order, so identical inputs serialize to
    /// identical bytes.
    pub fn save_jsonl(&self, path: &Path) -> Result<(), AnnotationError> {
        let mut out = fs::File::create(path)?;
        for (key, entries) in &self.frames {
            let record = StoreRecord {
                frame: key.to_string(),
                im: entries.clone(),
            };
            let line = serde_json::to_string(&record).expect("store record serializes");
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, AnnotationError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let file_label = path.display().to_string();
        let mut store = IndirectMemoryStore::default();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: StoreRecord =
                serde_json::from_str(&line).map_err(|e| AnnotationError::Parse {
                    file: file_label.clone(),
                    line: lineno + 1,
                    msg: e.to_string(),
                })?;
            let key = FrameKey::parse(&record.frame).ok_or_else(|| AnnotationError::Parse {
                file: file_label.clone(),
                line: lineno + 1,
                msg: format!("bad frame key {:?}", record.frame),
            })?;
            store.frames.insert(key, record.im);
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct StoreRecord {
    frame: String,
    im: Vec<IndirectMemoryEntry>,
}

/// Build the indirect-memory store: per frame, keep QA pairs whose question
/// occurs at least `n` times globally in training, convert each answer to a
/// hint set, and sort by question frequency. Questions excluded from hint
/// generation keep their gold answer as the single hint.
pub fn annotate_indirect_memory(
    train: &SampleSet,
    table: &AnswerFrequencyTable,
    n: u64,
    k: usize,
    rules: &ExclusionRules,
) -> Result<IndirectMemoryStore, AnnotationError> {
    let mut store = IndirectMemoryStore::default();
    for key in train.frames() {
        let mut kept: Vec<(u64, IndirectMemoryEntry)> = Vec::new();
        for &idx in train.frame_samples(key) {
            let sample = &train.samples()[idx];
            let freq = table.question_frequency(&sample.question);
            if freq < n {
                continue;
            }
            let hints = if rules.dm_excluded(&sample.question) {
                HintSet::new(vec![sample.answer.clone()])
            } else {
                annotate_direct_memory(&sample.question, Some(&sample.answer), table, k)?
            };
            kept.push((
                freq,
                IndirectMemoryEntry {
                    question: normalize_question(&sample.question),
                    hints,
                },
            ));
        }
        kept.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.question.cmp(&b.1.question)));
        if !kept.is_empty() {
            store.insert(key.clone(), kept.into_iter().map(|(_, e)| e).collect());
        }
    }
    Ok(store)
}
