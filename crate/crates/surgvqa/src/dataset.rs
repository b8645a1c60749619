//! Corpus ingestion, label vocabularies, question typing, and statistics.
//!
//! Three corpora are supported. Native layouts are parsed by per-dataset
//! adapters into one normalized schema; everything downstream consumes the
//! normalized form only. The interchange format is JSONL with one object
//! per sample and the fields `dataset`, `split`, `video`, `frame`, `image`,
//! `question`, `answer`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::IndirectMemoryStore;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("file layout: {0}")]
    FileLayout(String),
    #[error("{file}:{line}: {msg}")]
    Record {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{file}:{line}: answer {answer:?} is not in the {dataset} label vocabulary")]
    Label {
        file: String,
        line: usize,
        answer: String,
        dataset: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The three supported corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "endovis18")]
    EndoVis18,
    #[serde(rename = "endovis17")]
    EndoVis17,
    #[serde(rename = "cholec80")]
    Cholec80,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::EndoVis18 => "endovis18",
            DatasetId::EndoVis17 => "endovis17",
            DatasetId::Cholec80 => "cholec80",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "endovis18" | "endovis-18" | "endovis-18-vqa" => Some(DatasetId::EndoVis18),
            "endovis17" | "endovis-17" | "endovis-17-vqla" => Some(DatasetId::EndoVis17),
            "cholec80" | "cholec80-vqa" => Some(DatasetId::Cholec80),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test")]
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identity of one image: memory is attached per frame, so this is the cache
/// and annotation key throughout.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameKey {
    pub video: String,
    pub frame: String,
}

impl FrameKey {
    pub fn new(video: impl Into<String>, frame: impl Into<String>) -> Self {
        FrameKey {
            video: video.into(),
            frame: frame.into(),
        }
    }

    /// Parse the `video/frame` text form (first `/` splits).
    pub fn parse(s: &str) -> Option<Self> {
        let (video, frame) = s.split_once('/')?;
        if video.is_empty() || frame.is_empty() {
            return None;
        }
        Some(FrameKey::new(video, frame))
    }
}

impl fmt::Display for FrameKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.video, self.frame)
    }
}

/// One (image, question, answer) record in the normalized schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub dataset: DatasetId,
    pub split: Split,
    pub video: String,
    pub frame: String,
    pub image: String,
    pub question: String,
    pub answer: String,
}

impl Sample {
    pub fn frame_key(&self) -> FrameKey {
        FrameKey::new(self.video.clone(), self.frame.clone())
    }
}

/// An ordered collection of samples plus a frame index.
///
/// Iteration order is ingestion order and is deterministic; the frame index
/// partitions the samples (every sample appears in exactly one bucket).
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub dataset: DatasetId,
    pub split: Split,
    samples: Vec<Sample>,
    frames: Vec<FrameKey>,
    frame_index: HashMap<FrameKey, Vec<usize>>,
}

impl SampleSet {
    pub fn new(dataset: DatasetId, split: Split) -> Self {
        SampleSet {
            dataset,
            split,
            samples: Vec::new(),
            frames: Vec::new(),
            frame_index: HashMap::new(),
        }
    }

    /// Build from samples, validating labels and per-split uniqueness.
    pub fn from_samples(
        dataset: DatasetId,
        split: Split,
        samples: Vec<Sample>,
    ) -> Result<Self, DatasetError> {
        let vocab = LabelVocab::for_dataset(dataset);
        let mut set = SampleSet::new(dataset, split);
        let mut seen: HashSet<(String, String, String)> = HashSet::new();
        for (i, sample) in samples.into_iter().enumerate() {
            let loc = |msg: String| DatasetError::Record {
                file: "<samples>".into(),
                line: i + 1,
                msg,
            };
            if sample.question.trim().is_empty() {
                return Err(loc("empty question".into()));
            }
            if sample.answer.trim().is_empty() {
                return Err(loc("empty answer".into()));
            }
            if vocab.normalize(&sample.answer).is_none() {
                return Err(DatasetError::Label {
                    file: "<samples>".into(),
                    line: i + 1,
                    answer: sample.answer.clone(),
                    dataset: dataset.as_str().into(),
                });
            }
            let key = (
                sample.video.clone(),
                sample.frame.clone(),
                normalize_question(&sample.question),
            );
            if !seen.insert(key) {
                return Err(loc(format!(
                    "duplicate sample for frame {}/{} question {:?}",
                    sample.video, sample.frame, sample.question
                )));
            }
            set.push_unchecked(sample);
        }
        Ok(set)
    }

    fn push_unchecked(&mut self, sample: Sample) {
        let key = sample.frame_key();
        let idx = self.samples.len();
        match self.frame_index.get_mut(&key) {
            Some(bucket) => bucket.push(idx),
            None => {
                self.frames.push(key.clone());
                self.frame_index.insert(key, vec![idx]);
            }
        }
        self.samples.push(sample);
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Frame keys in first-seen order.
    pub fn frames(&self) -> &[FrameKey] {
        &self.frames
    }

    pub fn frame_samples(&self, key: &FrameKey) -> &[usize] {
        self.frame_index.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn frame_index(&self) -> &HashMap<FrameKey, Vec<usize>> {
        &self.frame_index
    }
}

/// Canonical label set for one dataset, with lookup under normalization.
#[derive(Debug, Clone)]
pub struct LabelVocab {
    pub dataset: DatasetId,
    labels: Vec<&'static str>,
    by_normalized: HashMap<String, usize>,
}

const ENDOVIS_LABELS: &[&str] = &[
    "kidney",
    "Idle",
    "Grasping",
    "Retraction",
    "Tissue_Manipulation",
    "Tool_Manipulation",
    "Cutting",
    "Cauterization",
    "Suction",
    "Looping",
    "Suturing",
    "Clipping",
    "Staple",
    "Ultrasound_Sensing",
    "left-top",
    "right-top",
    "left-bottom",
    "right-bottom",
];

const CHOLEC80_LABELS: &[&str] = &[
    "no",
    "yes",
    "0",
    "1",
    "2",
    "3",
    "calot triangle dissection",
    "gallbladder dissection",
    "clipping cutting",
    "gallbladder retraction",
    "cleaning coagulation",
    "gallbladder packaging",
    "preparation",
];

impl LabelVocab {
    /// The two EndoVis corpora share one vocabulary (18 labels); Cholec80
    /// has its own 13.
    pub fn for_dataset(dataset: DatasetId) -> Self {
        let labels: Vec<&'static str> = match dataset {
            DatasetId::EndoVis18 | DatasetId::EndoVis17 => ENDOVIS_LABELS.to_vec(),
            DatasetId::Cholec80 => CHOLEC80_LABELS.to_vec(),
        };
        let by_normalized = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (normalize_label(l), i))
            .collect();
        LabelVocab {
            dataset,
            labels,
            by_normalized,
        }
    }

    pub fn labels(&self) -> &[&'static str] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Map free text to a canonical label, or None if nothing matches.
    pub fn normalize(&self, text: &str) -> Option<&'static str> {
        self.by_normalized
            .get(&normalize_label(text))
            .map(|&i| self.labels[i])
    }

    pub fn index_of(&self, text: &str) -> Option<usize> {
        self.by_normalized.get(&normalize_label(text)).copied()
    }
}

/// Label normalization: trim, casefold, underscores to spaces, collapse
/// whitespace. No fuzzy matching beyond that.
pub fn normalize_label(text: &str) -> String {
    let replaced = text.replace('_', " ");
    replaced
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Question normalization used for table keys and leakage checks: trim and
/// collapse internal whitespace, preserving case.
pub fn normalize_question(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Question categories reported in per-type metric slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionType {
    Action,
    Location,
    Binary,
    Count,
    Unknown,
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            QuestionType::Action => "action",
            QuestionType::Location => "location",
            QuestionType::Binary => "binary",
            QuestionType::Count => "count",
            QuestionType::Unknown => "unknown",
        };
        f.write_str(s)
    }
}

/// Prefix patterns per dataset. These corpora use templated questions, so
/// plain prefixes classify every well-formed question; anything else maps
/// to `Unknown`, which is counted and surfaced but never fatal.
pub const ENDOVIS_PATTERNS: &[(&str, QuestionType)] = &[
    ("where is", QuestionType::Location),
    ("what is the state", QuestionType::Action),
];

pub const CHOLEC80_PATTERNS: &[(&str, QuestionType)] = &[
    ("how many", QuestionType::Count),
    ("what is the phase", QuestionType::Action),
    ("is ", QuestionType::Binary),
    ("are ", QuestionType::Binary),
    ("was ", QuestionType::Binary),
    ("does ", QuestionType::Binary),
    ("do ", QuestionType::Binary),
];

pub fn classify_question(question: &str, dataset: DatasetId) -> QuestionType {
    let q = normalize_question(question).to_lowercase();
    let patterns = match dataset {
        DatasetId::EndoVis18 | DatasetId::EndoVis17 => ENDOVIS_PATTERNS,
        DatasetId::Cholec80 => CHOLEC80_PATTERNS,
    };
    for (prefix, ty) in patterns {
        if q.starts_with(prefix) {
            return *ty;
        }
    }
    QuestionType::Unknown
}

/// Corpus statistics: counts plus rational averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_videos: usize,
    pub n_frames: usize,
    pub n_qa: usize,
    pub n_distinct_questions: usize,
    pub n_distinct_answers: usize,
    pub qa_per_frame: f64,
    pub answers_per_question: f64,
    /// Memory entries per frame; present only when an annotation store is
    /// supplied.
    pub mem_per_frame: Option<f64>,
}

/// Counts and averages over a sample set. `store`, when given, supplies the
/// per-frame indirect-memory entry counts for the `mem_per_frame` average.
pub fn compute_stats(set: &SampleSet, store: Option<&IndirectMemoryStore>) -> DatasetStats {
    let mut videos = HashSet::new();
    let mut answers_by_question: HashMap<String, HashSet<&str>> = HashMap::new();
    let mut distinct_answers = HashSet::new();
    for sample in set.samples() {
        videos.insert(sample.video.as_str());
        answers_by_question
            .entry(normalize_question(&sample.question))
            .or_default()
            .insert(sample.answer.as_str());
        distinct_answers.insert(normalize_label(&sample.answer));
    }
    let n_frames = set.frames().len();
    let n_qa = set.len();
    let n_q = answers_by_question.len();
    let qa_per_frame = if n_frames == 0 {
        0.0
    } else {
        n_qa as f64 / n_frames as f64
    };
    let answers_per_question = if n_q == 0 {
        0.0
    } else {
        answers_by_question
            .values()
            .map(HashSet::len)
            .sum::<usize>() as f64
            / n_q as f64
    };
    let mem_per_frame = store.map(|s| {
        if n_frames == 0 {
            0.0
        } else {
            let total: usize = set.frames().iter().map(|k| s.entries(k).len()).sum();
            total as f64 / n_frames as f64
        }
    });
    DatasetStats {
        n_videos: videos.len(),
        n_frames,
        n_qa,
        n_distinct_questions: n_q,
        n_distinct_answers: distinct_answers.len(),
        qa_per_frame,
        answers_per_question,
        mem_per_frame,
    }
}

/// Declares where a dataset lives on disk and which videos form each split.
///
/// The published corpora never shipped split lists alongside the QA files,
/// so the caller supplies them (usually from the adapter config file).
#[derive(Debug, Clone)]
pub struct AdapterConfig {
    pub root: PathBuf,
    pub train_videos: Vec<String>,
    pub test_videos: Vec<String>,
    /// Subdirectory of each video that holds the image files.
    pub image_subdir: String,
    /// Extension of image files referenced by `Sample.image`.
    pub image_ext: String,
}

impl AdapterConfig {
    pub fn new(root: impl Into<PathBuf>, dataset: DatasetId) -> Self {
        let image_subdir = match dataset {
            DatasetId::EndoVis18 | DatasetId::EndoVis17 => "left_frames".to_string(),
            DatasetId::Cholec80 => "frames".to_string(),
        };
        AdapterConfig {
            root: root.into(),
            train_videos: Vec::new(),
            test_videos: Vec::new(),
            image_subdir,
            image_ext: "png".to_string(),
        }
    }

    fn videos_for(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train_videos,
            Split::Test => &self.test_videos,
        }
    }
}

/// Load one split through the native-layout adapter.
///
/// Native layout: `<root>/<video>/vqa/<frame>.txt`, one `question|answer`
/// pair per line; the image path recorded on each sample is
/// `<video>/<image_subdir>/<frame>.<ext>`.
pub fn load_dataset(
    config: &AdapterConfig,
    dataset: DatasetId,
    split: Split,
) -> Result<SampleSet, DatasetError> {
    let vocab = LabelVocab::for_dataset(dataset);
    let videos = config.videos_for(split);
    if videos.is_empty() {
        return Err(DatasetError::FileLayout(format!(
            "no videos configured for {} split {}",
            dataset, split
        )));
    }
    let mut set = SampleSet::new(dataset, split);
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    for video in videos {
        let qa_dir = config.root.join(video).join("vqa");
        if !qa_dir.is_dir() {
            return Err(DatasetError::FileLayout(format!(
                "missing QA directory {}",
                qa_dir.display()
            )));
        }
        let mut frame_files: Vec<PathBuf> = fs::read_dir(&qa_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "txt").unwrap_or(false))
            .collect();
        if frame_files.is_empty() {
            return Err(DatasetError::FileLayout(format!(
                "no QA files under {}",
                qa_dir.display()
            )));
        }
        frame_files.sort();
        for path in frame_files {
            let frame = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let file_label = path.display().to_string();
            let reader = BufReader::new(fs::File::open(&path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let (question, answer) = line.split_once('|').ok_or(DatasetError::Record {
                    file: file_label.clone(),
                    line: lineno + 1,
                    msg: "expected `question|answer`".into(),
                })?;
                let question = question.trim();
                let answer = answer.trim();
                if question.is_empty() || answer.is_empty() {
                    return Err(DatasetError::Record {
                        file: file_label.clone(),
                        line: lineno + 1,
                        msg: "empty question or answer".into(),
                    });
                }
                if vocab.normalize(answer).is_none() {
                    return Err(DatasetError::Label {
                        file: file_label.clone(),
                        line: lineno + 1,
                        answer: answer.into(),
                        dataset: dataset.as_str().into(),
                    });
                }
                let key = (video.clone(), frame.clone(), normalize_question(question));
                if !seen.insert(key) {
                    return Err(DatasetError::Record {
                        file: file_label.clone(),
                        line: lineno + 1,
                        msg: format!("duplicate question {:?}", question),
                    });
                }
                set.push_unchecked(Sample {
                    dataset,
                    split,
                    video: video.clone(),
                    frame: frame.clone(),
                    image: format!(
                        "{video}/{}/{frame}.{}",
                        config.image_subdir, config.image_ext
                    ),
                    question: question.to_string(),
                    answer: answer.to_string(),
                });
            }
        }
    }
    Ok(set)
}

/// Read a sample set from the normalized JSONL interchange file.
pub fn load_jsonl(path: &Path) -> Result<SampleSet, DatasetError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let file_label = path.display().to_string();
    let mut samples = Vec::new();
    let mut header: Option<(DatasetId, Split)> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| DatasetError::Record {
            file: file_label.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        match header {
            None => header = Some((sample.dataset, sample.split)),
            Some((d, s)) => {
                if sample.dataset != d || sample.split != s {
                    return Err(DatasetError::Record {
                        file: file_label.clone(),
                        line: lineno + 1,
                        msg: "mixed dataset or split within one file".into(),
                    });
                }
            }
        }
        samples.push(sample);
    }
    let (dataset, split) = header.ok_or(DatasetError::FileLayout(format!(
        "{file_label}: no records"
    )))?;
    SampleSet::from_samples(dataset, split, samples)
}

/// Write a sample set to the normalized JSONL interchange format
/// (UTF-8, LF line endings, one object per line).
pub fn save_jsonl(set: &SampleSet, path: &Path) -> Result<(), DatasetError> {
    let mut out = fs::File::create(path)?;
    for sample in set.samples() {
        let line = serde_json::to_string(sample).expect("sample serializes");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse the plain-text `key = value` adapter config format. `#` starts a
/// comment; values containing commas split into lists at the call site.
pub fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>, DatasetError> {
    let text = fs::read_to_string(path)?;
    Ok(parse_kv_text(&text))
}

pub fn parse_kv_text(text: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = match line.split_once('#') {
            Some((before, _)) => before,
            None => line,
        };
        if let Some((k, v)) = line.split_once('=') {
            let k = k.trim();
            let v = v.trim();
            if !k.is_empty() {
                map.insert(k.to_string(), v.to_string());
            }
        }
    }
    map
}
