//! Three-stage inference and whole-split orchestration.
//!
//! Per sample: (1) generate direct memory for the question and parse the
//! hint list, (2) generate indirect memory for the frame, parse it, and
//! keep the top-M entries by TF-IDF cosine with the query question excluded
//! (leakage), (3) answer the question with the composite memory prepended.
//! Indirect memory depends only on the image, so stage 2 runs once per
//! frame and is shared by all of that frame's questions.
//!
//! Split runs use a bounded worker pool; output order always equals input
//! order, and completed predictions stream into an append-only checkpoint
//! file that makes runs resumable and idempotent on replay.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::{ExclusionRules, HintSet, IndirectMemoryEntry};
use crate::backend::{Backend, BackendError, BackendRequest, DecodingParams, ImagePayload};
use crate::dataset::{DatasetId, FrameKey, Sample, SampleSet};
use crate::prompting::{parse_hint_list, parse_indirect_memory, render_prompt, PromptTask};
use crate::retrieval::select_indirect_memory;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("sample {sample}: {source}")]
    Sample {
        sample: String,
        source: BackendError,
    },
    #[error("render: {0}")]
    Render(#[from] crate::prompting::RenderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("failure ratio {ratio:.3} exceeds the abort threshold {threshold:.3} ({failures}/{total} samples failed)")]
    TooManyFailures {
        ratio: f64,
        threshold: f64,
        failures: usize,
        total: usize,
    },
    #[error("checkpoint {file}:{line}: {msg}")]
    Checkpoint {
        file: String,
        line: usize,
        msg: String,
    },
}

/// Knobs for one inference run.
#[derive(Debug, Clone)]
pub struct InferConfig {
    pub dataset: DatasetId,
    pub k: usize,
    pub m: usize,
    pub dm_params: DecodingParams,
    pub im_params: DecodingParams,
    pub vqa_params: DecodingParams,
}

impl InferConfig {
    /// Per-dataset defaults: K=2 hints everywhere; M=3 indirect-memory
    /// entries for the EndoVis corpora and 1 for Cholec80; direct-memory
    /// decoding budgets 12/12/16 tokens greedy; indirect memory 160 tokens
    /// with beam width 3.
    pub fn defaults(dataset: DatasetId) -> Self {
        let (m, dm_tokens) = match dataset {
            DatasetId::EndoVis18 => (3, 12),
            DatasetId::EndoVis17 => (3, 12),
            DatasetId::Cholec80 => (1, 16),
        };
        InferConfig {
            dataset,
            k: 2,
            m,
            dm_params: DecodingParams::greedy(dm_tokens),
            im_params: DecodingParams::beam(160, 3),
            vqa_params: DecodingParams::greedy(16),
        }
    }
}

/// Where image bytes come from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    /// Read real files under this root, using each sample's image path.
    Files(PathBuf),
    /// Deterministic placeholder payloads carrying the frame key; used for
    /// mock-backed runs and fixtures without image files.
    Synthetic,
}

impl ImageSource {
    fn payload(&self, sample: &Sample) -> Result<ImagePayload, PipelineError> {
        match self {
            ImageSource::Synthetic => Ok(ImagePayload::synthetic(&sample.frame_key())),
            ImageSource::Files(root) => {
                let path = root.join(&sample.image);
                let bytes = fs::read(&path)?;
                let media_type = match path.extension().and_then(|e| e.to_str()) {
                    Some("png") => "image/png",
                    Some("jpg") | Some("jpeg") => "image/jpeg",
                    _ => "application/octet-stream",
                };
                Ok(ImagePayload {
                    bytes,
                    media_type: media_type.into(),
                })
            }
        }
    }
}

/// Everything recorded about one answered sample. Serialized one per line
/// into `predictions.jsonl`; the same schema is used for the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub dataset: DatasetId,
    pub video: String,
    pub frame: String,
    pub question: String,
    pub gold: String,
    /// Exactly the final-stage backend text; label normalization happens
    /// only in metrics.
    pub answer_text: String,
    /// Rendered direct-memory hint list, e.g. `[Idle, Grasping]`.
    pub dm: String,
    /// Rendered selected indirect-memory lines, in rank order.
    pub im_selected: Vec<String>,
    pub flags: Vec<String>,
    pub latency_ms: u64,
}

impl Prediction {
    pub fn frame_key(&self) -> FrameKey {
        FrameKey::new(self.video.clone(), self.frame.clone())
    }

    /// Hint labels recovered from the stored direct-memory string.
    pub fn dm_hints(&self) -> Vec<String> {
        parse_hint_list(&self.dm).hints.labels().to_vec()
    }

    /// All hint labels across the stored selected indirect memory.
    pub fn im_selected_hints(&self) -> impl Iterator<Item = String> + '_ {
        self.im_selected.iter().flat_map(|line| {
            crate::prompting::parse_entry_line(line)
                .map(|e| e.hints.labels().to_vec())
                .unwrap_or_default()
        })
    }

    pub fn failed(&self) -> bool {
        self.flags.iter().any(|f| f.starts_with("error:"))
    }
}

/// In-memory result of stage 2 for one frame, shared across its questions.
#[derive(Debug, Clone, Default)]
struct ImGeneration {
    entries: Vec<IndirectMemoryEntry>,
    skipped_lines: usize,
    latency_ms: u64,
}

/// Composite memory and parse bookkeeping for one sample.
#[derive(Debug, Clone)]
pub struct MemoryTrace {
    pub dm: HintSet,
    pub dm_lenient: bool,
    pub dm_malformed: bool,
    pub im_generated: Vec<IndirectMemoryEntry>,
    pub im_selected: Vec<IndirectMemoryEntry>,
    pub im_skipped_lines: usize,
}

struct RunContext<'a, B: Backend> {
    backend: &'a B,
    config: &'a InferConfig,
    images: &'a ImageSource,
    trace: Option<&'a TraceSink>,
    request_counter: &'a AtomicU64,
}

impl<'a, B: Backend> RunContext<'a, B> {
    fn call(
        &self,
        sample_key: &str,
        frame: &FrameKey,
        task: PromptTask,
        prompt: &str,
        image: &ImagePayload,
        params: DecodingParams,
    ) -> Result<crate::backend::BackendResponse, PipelineError> {
        let request_id = format!(
            "req-{:06}",
            self.request_counter.fetch_add(1, Ordering::SeqCst) + 1
        );
        let req = BackendRequest {
            request_id: request_id.clone(),
            image: image.clone(),
            prompt: prompt.to_string(),
            params,
        };
        let result = self.backend.complete(&req);
        if let Some(sink) = self.trace {
            let (text, latency_ms) = match &result {
                Ok(resp) => (resp.text.clone(), resp.latency.as_millis() as u64),
                Err(e) => (format!("<error: {e}>"), 0),
            };
            sink.write(&TraceEntry {
                request_id,
                frame: frame.to_string(),
                task: task.as_str().into(),
                prompt_hash: sha256_hex(prompt),
                response_text: text,
                latency_ms,
            });
        }
        result.map_err(|source| PipelineError::Sample {
            sample: sample_key.to_string(),
            source,
        })
    }

    fn generate_im(
        &self,
        frame: &FrameKey,
        image: &ImagePayload,
    ) -> Result<ImGeneration, PipelineError> {
        if self.config.m == 0 {
            return Ok(ImGeneration::default());
        }
        let bundle = render_prompt(PromptTask::IndirectMemoryGen, frame, None, None, None)?;
        let resp = self.call(
            &frame.to_string(),
            frame,
            PromptTask::IndirectMemoryGen,
            &bundle.rendered_text,
            image,
            self.config.im_params,
        )?;
        let parsed = parse_indirect_memory(&resp.text);
        Ok(ImGeneration {
            entries: parsed.entries,
            skipped_lines: parsed.skipped_lines,
            latency_ms: resp.latency.as_millis() as u64,
        })
    }
}

/// Answer one sample with the three-stage procedure. `im_gen` is the
/// frame's stage-2 output (computed once per frame by the runner).
fn infer_sample<B: Backend>(
    ctx: &RunContext<'_, B>,
    sample: &Sample,
    image: &ImagePayload,
    im_gen: &ImGeneration,
) -> Result<Prediction, PipelineError> {
    let frame = sample.frame_key();
    let sample_key = format!("{}/{}", frame, sample.question);
    let rules = ExclusionRules::for_dataset(ctx.config.dataset);
    let mut flags: Vec<String> = Vec::new();
    let mut latency_ms = im_gen.latency_ms;

    // Stage 1: direct memory. Excluded questions skip the call and carry
    // the [NULL] sentinel.
    let (dm, dm_lenient, dm_malformed) = if rules.dm_excluded(&sample.question) {
        (HintSet::null(), false, false)
    } else {
        let bundle = render_prompt(
            PromptTask::DirectMemoryGen,
            &frame,
            Some(&sample.question),
            None,
            None,
        )?;
        let resp = ctx.call(
            &sample_key,
            &frame,
            PromptTask::DirectMemoryGen,
            &bundle.rendered_text,
            image,
            ctx.config.dm_params,
        )?;
        latency_ms += resp.latency.as_millis() as u64;
        let parsed = parse_hint_list(&resp.text);
        (parsed.hints, parsed.lenient, parsed.malformed)
    };
    if dm_lenient {
        flags.push("dm_parse_lenient".into());
    }
    if dm_malformed {
        flags.push("dm_parse_malformed".into());
    }

    // Stage 2 happened per frame; select against this sample's question.
    let im_selected = select_indirect_memory(&sample.question, &im_gen.entries, ctx.config.m, true);
    if im_gen.skipped_lines > 0 {
        flags.push(format!("im_lines_skipped={}", im_gen.skipped_lines));
    }

    // Stage 3: memory-augmented answer.
    let bundle = render_prompt(
        PromptTask::MemoryAugmentedVqa,
        &frame,
        Some(&sample.question),
        Some(&im_selected),
        Some(&dm),
    )?;
    let resp = ctx.call(
        &sample_key,
        &frame,
        PromptTask::MemoryAugmentedVqa,
        &bundle.rendered_text,
        image,
        ctx.config.vqa_params,
    )?;
    latency_ms += resp.latency.as_millis() as u64;

    Ok(Prediction {
        dataset: sample.dataset,
        video: sample.video.clone(),
        frame: sample.frame.clone(),
        question: sample.question.clone(),
        gold: sample.answer.clone(),
        answer_text: resp.text,
        dm: dm.render(),
        im_selected: im_selected
            .iter()
            .map(IndirectMemoryEntry::render)
            .collect(),
        flags,
        latency_ms,
    })
}

/// One-shot public form of the per-sample procedure (stage 2 included).
pub fn infer_one<B: Backend>(
    backend: &B,
    sample: &Sample,
    config: &InferConfig,
    images: &ImageSource,
) -> Result<Prediction, PipelineError> {
    let counter = AtomicU64::new(0);
    let ctx = RunContext {
        backend,
        config,
        images,
        trace: None,
        request_counter: &counter,
    };
    let image = images.payload(sample)?;
    let im_gen = ctx.generate_im(&sample.frame_key(), &image)?;
    infer_sample(&ctx, sample, &image, &im_gen)
}

#[derive(Debug, Serialize)]
struct TraceEntry {
    request_id: String,
    frame: String,
    task: String,
    prompt_hash: String,
    response_text: String,
    latency_ms: u64,
}

struct TraceSink {
    writer: Mutex<Box<dyn Write + Send>>,
}

impl TraceSink {
    fn write(&self, entry: &TraceEntry) {
        let mut guard = self.writer.lock().expect("trace sink poisoned");
        let line = serde_json::to_string(entry).expect("trace entry serializes");
        let _ = guard.write_all(line.as_bytes());
        let _ = guard.write_all(b"\n");
        let _ = guard.flush();
    }
}

fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Options governing a split run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub parallelism: usize,
    /// Append-only checkpoint; existing completed predictions are reused.
    pub checkpoint: Option<PathBuf>,
    /// Run trace JSONL of every backend request/response.
    pub trace: Option<PathBuf>,
    /// The run fails once more than this fraction of samples fail.
    pub max_failure_ratio: f64,
    pub images: ImageSource,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            parallelism: 1,
            checkpoint: None,
            trace: None,
            max_failure_ratio: 0.1,
            images: ImageSource::Synthetic,
        }
    }
}

#[derive(Debug)]
pub struct RunResult {
    /// One prediction per input sample, in input order. Failed samples are
    /// present with an `error:` flag and empty answer text.
    pub predictions: Vec<Prediction>,
    pub failures: usize,
    /// Samples answered from the checkpoint rather than recomputed.
    pub resumed: usize,
}

/// Run the whole split with at most `parallelism` in-flight backend calls.
///
/// Indirect memory is generated once per frame and shared; output order is
/// input order regardless of completion order; when a checkpoint path is
/// given, finished predictions are appended as they complete and prior
/// completed work is skipped on restart.
pub fn run_split<B: Backend>(
    set: &SampleSet,
    backend: &B,
    config: &InferConfig,
    options: &RunOptions,
) -> Result<RunResult, PipelineError> {
    let n = set.len();
    let mut slots: Vec<Option<Prediction>> = vec![None; n];
    let mut resumed = 0usize;

    if let Some(path) = &options.checkpoint {
        if path.exists() {
            for (idx, pred) in load_checkpoint(path, set)? {
                if slots[idx].is_none() {
                    slots[idx] = Some(pred);
                    resumed += 1;
                }
            }
        }
    }

    let pending: Vec<usize> = (0..n).filter(|&i| slots[i].is_none()).collect();
    let trace_sink = match &options.trace {
        Some(path) => Some(TraceSink {
            writer: Mutex::new(Box::new(fs::File::create(path)?)),
        }),
        None => None,
    };
    let mut checkpoint_file = match &options.checkpoint {
        Some(path) => Some(
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?,
        ),
        None => None,
    };

    let request_counter = AtomicU64::new(0);
    let ctx = RunContext {
        backend,
        config,
        images: &options.images,
        trace: trace_sink.as_ref(),
        request_counter: &request_counter,
    };

    // Frame-level IM cache: the first worker to need a frame populates it
    // while holding that frame's slot lock; later workers wait and reuse.
    let im_cache: HashMap<FrameKey, Mutex<Option<Arc<ImGeneration>>>> = set
        .frames()
        .iter()
        .map(|k| (k.clone(), Mutex::new(None)))
        .collect();

    let next = AtomicUsize::new(0);
    let workers = options.parallelism.max(1).min(pending.len().max(1));
    let (tx, rx) = mpsc::channel::<(usize, Prediction)>();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let ctx = &ctx;
            let pending = &pending;
            let next = &next;
            let im_cache = &im_cache;
            scope.spawn(move || loop {
                let slot = next.fetch_add(1, Ordering::SeqCst);
                if slot >= pending.len() {
                    break;
                }
                let idx = pending[slot];
                let sample = &set.samples()[idx];
                let prediction = process_sample(ctx, sample, im_cache);
                if tx.send((idx, prediction)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (idx, prediction) in rx {
            if let Some(file) = checkpoint_file.as_mut() {
                if !prediction.failed() {
                    let line = serde_json::to_string(&prediction).expect("prediction serializes");
                    let _ = file.write_all(line.as_bytes());
                    let _ = file.write_all(b"\n");
                    let _ = file.flush();
                }
            }
            slots[idx] = Some(prediction);
        }
    });

    let predictions: Vec<Prediction> = slots
        .into_iter()
        .map(|p| p.expect("every slot filled"))
        .collect();
    let failures = predictions.iter().filter(|p| p.failed()).count();
    if n > 0 {
        let ratio = failures as f64 / n as f64;
        if ratio > options.max_failure_ratio {
            return Err(PipelineError::TooManyFailures {
                ratio,
                threshold: options.max_failure_ratio,
                failures,
                total: n,
            });
        }
    }
    Ok(RunResult {
        predictions,
        failures,
        resumed,
    })
}

fn process_sample<B: Backend>(
    ctx: &RunContext<'_, B>,
    sample: &Sample,
    im_cache: &HashMap<FrameKey, Mutex<Option<Arc<ImGeneration>>>>,
) -> Prediction {
    let frame = sample.frame_key();
    let attempt = (|| -> Result<Prediction, PipelineError> {
        let image = ctx.images.payload(sample)?;
        let im_gen = {
            let cell = im_cache.get(&frame).expect("frame is indexed");
            let mut guard = cell.lock().expect("im cache poisoned");
            match guard.as_ref() {
                Some(cached) => Arc::clone(cached),
                None => {
                    let fresh = Arc::new(ctx.generate_im(&frame, &image)?);
                    *guard = Some(Arc::clone(&fresh));
                    fresh
                }
            }
        };
        infer_sample(ctx, sample, &image, &im_gen)
    })();
    attempt.unwrap_or_else(|err| Prediction {
        dataset: sample.dataset,
        video: sample.video.clone(),
        frame: sample.frame.clone(),
        question: sample.question.clone(),
        gold: sample.answer.clone(),
        answer_text: String::new(),
        dm: HintSet::empty().render(),
        im_selected: Vec::new(),
        flags: vec![format!("error:{err}")],
        latency_ms: 0,
    })
}

/// Write predictions in input order, one JSON object per line.
pub fn save_predictions(predictions: &[Prediction], path: &Path) -> Result<(), PipelineError> {
    let mut out = fs::File::create(path)?;
    for pred in predictions {
        let line = serde_json::to_string(pred).expect("prediction serializes");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, PipelineError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let file_label = path.display().to_string();
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pred: Prediction =
            serde_json::from_str(&line).map_err(|e| PipelineError::Checkpoint {
                file: file_label.clone(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        out.push(pred);
    }
    Ok(out)
}

/// Match checkpointed predictions back to sample indices. Lines for samples
/// outside the set are ignored; the first line per sample wins, making
/// replay idempotent.
fn load_checkpoint(
    path: &Path,
    set: &SampleSet,
) -> Result<Vec<(usize, Prediction)>, PipelineError> {
    let mut by_key: HashMap<(String, String, String), usize> = HashMap::new();
    for (idx, sample) in set.samples().iter().enumerate() {
        by_key.insert(
            (
                sample.video.clone(),
                sample.frame.clone(),
                crate::dataset::normalize_question(&sample.question),
            ),
            idx,
        );
    }
    let mut out = Vec::new();
    for pred in load_predictions(path)? {
        let key = (
            pred.video.clone(),
            pred.frame.clone(),
            crate::dataset::normalize_question(&pred.question),
        );
        if let Some(&idx) = by_key.get(&key) {
            out.push((idx, pred));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{
        annotate_direct_memory, annotate_indirect_memory, build_frequency_table,
        IndirectMemoryStore,
    };
    use crate::backend::{mock_from_annotations, DmAnnotation, ScriptedMock};
    use crate::dataset::Split;
    use std::collections::HashMap as Map;
    use std::time::Duration;

    fn sample(video: &str, frame: &str, q: &str, a: &str) -> Sample {
        Sample {
            dataset: DatasetId::EndoVis18,
            split: Split::Train,
            video: video.into(),
            frame: frame.into(),
            image: format!("{video}/left_frames/{frame}.png"),
            question: q.into(),
            answer: a.into(),
        }
    }

    fn fixture() -> SampleSet {
        let mut samples = Vec::new();
        for f in 0..4 {
            let frame = format!("frame{f:03}");
            samples.push(sample(
                "seq_1",
                &frame,
                "Where is bipolar forceps located?",
                "left-top",
            ));
            samples.push(sample(
                "seq_1",
                &frame,
                "What is the state of bipolar forceps?",
                "Idle",
            ));
            samples.push(sample(
                "seq_1",
                &frame,
                "Where is prograsp forceps located?",
                "right-top",
            ));
        }
        SampleSet::from_samples(DatasetId::EndoVis18, Split::Train, samples).unwrap()
    }

    fn oracle_for(set: &SampleSet, config: &InferConfig) -> (ScriptedMock, IndirectMemoryStore) {
        let table = build_frequency_table(set).unwrap();
        let rules = ExclusionRules::for_dataset(set.dataset);
        let store = annotate_indirect_memory(set, &table, 1, config.k, &rules).unwrap();
        let mut dm: Map<(FrameKey, String), DmAnnotation> = Map::new();
        for s in set.samples() {
            let hints =
                annotate_direct_memory(&s.question, Some(&s.answer), &table, config.k).unwrap();
            dm.insert(
                (
                    s.frame_key(),
                    crate::dataset::normalize_question(&s.question),
                ),
                DmAnnotation {
                    hints,
                    gold: s.answer.clone(),
                },
            );
        }
        (mock_from_annotations(&store, &dm), store)
    }

    #[test]
    fn oracle_mock_round_trips_every_gold_answer() {
        let set = fixture();
        let config = InferConfig::defaults(DatasetId::EndoVis18);
        let (mock, _) = oracle_for(&set, &config);
        let result = run_split(&set, &mock, &config, &RunOptions::default()).unwrap();
        assert_eq!(result.failures, 0);
        for (pred, s) in result.predictions.iter().zip(set.samples()) {
            assert_eq!(pred.answer_text, s.answer);
            assert_eq!(pred.question, s.question);
        }
    }

    #[test]
    fn m_zero_skips_stage_two_entirely() {
        let set = fixture();
        let mut config = InferConfig::defaults(DatasetId::EndoVis18);
        config.m = 0;
        let (mock, _) = oracle_for(&set, &config);
        let result = run_split(&set, &mock, &config, &RunOptions::default()).unwrap();
        assert!(result.predictions.iter().all(|p| p.im_selected.is_empty()));
        assert_eq!(result.failures, 0);
    }

    #[test]
    fn own_question_is_excluded_from_selected_memory() {
        let set = fixture();
        let config = InferConfig::defaults(DatasetId::EndoVis18);
        let (mock, _) = oracle_for(&set, &config);
        let result = run_split(&set, &mock, &config, &RunOptions::default()).unwrap();
        for pred in &result.predictions {
            let own = crate::dataset::normalize_question(&pred.question);
            for line in &pred.im_selected {
                let entry = crate::prompting::parse_entry_line(line).unwrap();
                assert_ne!(crate::dataset::normalize_question(&entry.question), own);
            }
        }
    }

    #[test]
    fn im_is_generated_once_per_frame() {
        use std::sync::atomic::AtomicUsize;
        struct Counting<B> {
            inner: B,
            im_calls: AtomicUsize,
        }
        impl<B: Backend> Backend for Counting<B> {
            fn complete(
                &self,
                req: &BackendRequest,
            ) -> Result<crate::backend::BackendResponse, BackendError> {
                if req.prompt.contains(crate::prompting::IM_INSTRUCTION) {
                    self.im_calls.fetch_add(1, Ordering::SeqCst);
                }
                self.inner.complete(req)
            }
            fn id(&self) -> &str {
                self.inner.id()
            }
        }
        let set = fixture();
        let config = InferConfig::defaults(DatasetId::EndoVis18);
        let (mock, _) = oracle_for(&set, &config);
        let counting = Counting {
            inner: mock,
            im_calls: AtomicUsize::new(0),
        };
        let options = RunOptions {
            parallelism: 4,
            ..RunOptions::default()
        };
        run_split(&set, &counting, &config, &options).unwrap();
        assert_eq!(counting.im_calls.load(Ordering::SeqCst), set.frames().len());
    }

    #[test]
    fn output_is_identical_across_parallelism() {
        let set = fixture();
        let config = InferConfig::defaults(DatasetId::EndoVis18);
        let (mock, _) = oracle_for(&set, &config);
        let serial = run_split(&set, &mock, &config, &RunOptions::default()).unwrap();
        let parallel = run_split(
            &set,
            &mock,
            &config,
            &RunOptions {
                parallelism: 8,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(serial.predictions, parallel.predictions);
    }

    #[test]
    fn interrupted_run_resumes_to_identical_output() {
        let set = fixture();
        let config = InferConfig::defaults(DatasetId::EndoVis18);
        let (mock, _) = oracle_for(&set, &config);
        let dir = tempfile::tempdir().unwrap();
        let checkpoint = dir.path().join("checkpoint.jsonl");

        // Uninterrupted reference.
        let full = run_split(&set, &mock, &config, &RunOptions::default()).unwrap();

        // Simulate a kill after the first half of the samples.
        let half = SampleSet::from_samples(
            set.dataset,
            set.split,
            set.samples()[..set.len() / 2].to_vec(),
        )
        .unwrap();
        let options = RunOptions {
            checkpoint: Some(checkpoint.clone()),
            ..RunOptions::default()
        };
        run_split(&half, &mock, &config, &options).unwrap();

        let resumed = run_split(&set, &mock, &config, &options).unwrap();
        assert_eq!(resumed.resumed, set.len() / 2);
        assert_eq!(resumed.predictions, full.predictions);
    }

    #[test]
    fn backend_failures_are_flagged_not_fatal() {
        struct FailOnce;
        impl Backend for FailOnce {
            fn complete(
                &self,
                req: &BackendRequest,
            ) -> Result<crate::backend::BackendResponse, BackendError> {
                if req.prompt.contains("prograsp") {
                    Err(BackendError::Run("nope".into()))
                } else {
                    Ok(crate::backend::BackendResponse {
                        text: "[x]".into(),
                        latency: Duration::ZERO,
                        backend_id: "f".into(),
                        raw: None,
                    })
                }
            }
            fn id(&self) -> &str {
                "fail"
            }
        }
        let set = fixture();
        let config = InferConfig::defaults(DatasetId::EndoVis18);
        let options = RunOptions {
            max_failure_ratio: 0.5,
            ..RunOptions::default()
        };
        let result = run_split(&set, &FailOnce, &config, &options).unwrap();
        assert!(result.failures > 0);
        let failed: Vec<&Prediction> = result.predictions.iter().filter(|p| p.failed()).collect();
        assert!(failed.iter().all(|p| p.question.contains("prograsp")));
    }

    #[test]
    fn failure_ratio_above_threshold_fails_the_run() {
        struct AlwaysFail;
        impl Backend for AlwaysFail {
            fn complete(
                &self,
                _req: &BackendRequest,
            ) -> Result<crate::backend::BackendResponse, BackendError> {
                Err(BackendError::Run("down".into()))
            }
            fn id(&self) -> &str {
                "down"
            }
        }
        let set = fixture();
        let config = InferConfig::defaults(DatasetId::EndoVis18);
        let err = run_split(&set, &AlwaysFail, &config, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, PipelineError::TooManyFailures { .. }));
    }
}
