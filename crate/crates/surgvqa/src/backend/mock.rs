//! Deterministic scripted mock backend, plus a chaos wrapper.
//!
//! The mock recovers the frame key from the synthetic image payload and the
//! task + question from the prompt text, then replays a canned response.
//! `mock_from_annotations` scripts it from ground-truth annotations so a
//! full pipeline run must reproduce every gold answer exactly — the
//! end-to-end oracle used by the acceptance suite.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendRequest, BackendResponse};
use crate::annotation::{HintSet, IndirectMemoryStore};
use crate::dataset::{normalize_question, FrameKey};
use crate::prompting::{DM_INSTRUCTION, IM_INSTRUCTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockTask {
    Dm,
    Im,
    Mvqa,
    Vqa,
}

/// What the mock understood about a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ScriptKey {
    frame: FrameKey,
    task: MockTask,
    question: Option<String>,
}

/// Recover (task, question) from a rendered prompt.
fn classify_prompt(prompt: &str) -> (MockTask, Option<String>) {
    if prompt.contains(IM_INSTRUCTION) {
        return (MockTask::Im, None);
    }
    if let Some(line) = prompt.lines().find(|l| l.contains(DM_INSTRUCTION)) {
        let question = line
            .trim_end_matches("<|end|>")
            .trim_end_matches(DM_INSTRUCTION)
            .trim();
        return (MockTask::Dm, Some(normalize_question(question)));
    }
    if prompt.contains("\nMemory:\n") {
        let mut lines = prompt.lines();
        while let Some(line) = lines.next() {
            if line == "Question:" {
                if let Some(qline) = lines.next() {
                    let qline = qline.trim_end_matches("<|end|>");
                    let question = match qline.rfind('[') {
                        Some(open) => qline[..open].trim(),
                        None => qline.trim(),
                    };
                    return (MockTask::Mvqa, Some(normalize_question(question)));
                }
            }
        }
        return (MockTask::Mvqa, None);
    }
    // Vanilla VQA: the question is the third template line.
    let question = prompt
        .lines()
        .nth(2)
        .map(|l| normalize_question(l.trim_end_matches("<|end|>")));
    (MockTask::Vqa, question)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScriptEntry {
    frame: String,
    task: MockTask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question: Option<String>,
    response: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    latency_ms: u64,
    entries: Vec<ScriptEntry>,
}

/// Replays scripted responses keyed by (frame, task, question).
pub struct ScriptedMock {
    script: HashMap<ScriptKey, String>,
    latency: Duration,
    id: String,
}

impl ScriptedMock {
    pub fn new() -> Self {
        ScriptedMock {
            script: HashMap::new(),
            latency: Duration::ZERO,
            id: "mock".into(),
        }
    }

    /// Injected per-request latency. The mock sleeps for this long and
    /// reports exactly this duration, keeping recorded latencies
    /// deterministic.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn register(
        &mut self,
        frame: FrameKey,
        task: MockTask,
        question: Option<&str>,
        response: impl Into<String>,
    ) {
        self.script.insert(
            ScriptKey {
                frame,
                task,
                question: question.map(normalize_question),
            },
            response.into(),
        );
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut entries: Vec<ScriptEntry> = self
            .script
            .iter()
            .map(|(k, v)| ScriptEntry {
                frame: k.frame.to_string(),
                task: k.task,
                question: k.question.clone(),
                response: v.clone(),
            })
            .collect();
        entries.sort_by(|a, b| {
            (&a.frame, format!("{:?}", a.task), &a.question).cmp(&(
                &b.frame,
                format!("{:?}", b.task),
                &b.question,
            ))
        });
        let file = ScriptFile {
            latency_ms: self.latency.as_millis() as u64,
            entries,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("mock script {}: {e}", path.display())))?;
        let file: ScriptFile = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("mock script {}: {e}", path.display())))?;
        let mut mock = ScriptedMock::new().with_latency(Duration::from_millis(file.latency_ms));
        for entry in file.entries {
            let frame = FrameKey::parse(&entry.frame).ok_or_else(|| {
                BackendError::Config(format!("mock script: bad frame key {:?}", entry.frame))
            })?;
            mock.register(frame, entry.task, entry.question.as_deref(), entry.response);
        }
        Ok(mock)
    }
}

impl Default for ScriptedMock {
    fn default() -> Self {
        Self::new()
    }
}

impl Backend for ScriptedMock {
    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let frame = req.image.synthetic_frame().ok_or_else(|| {
            BackendError::MockMiss(format!(
                "request {}: image payload does not carry a frame key",
                req.request_id
            ))
        })?;
        let (task, question) = classify_prompt(&req.prompt);
        let key = ScriptKey {
            frame,
            task,
            question,
        };
        let text = self.script.get(&key).ok_or_else(|| {
            BackendError::MockMiss(format!(
                "no scripted response for frame {} task {:?} question {:?}",
                key.frame, key.task, key.question
            ))
        })?;
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        Ok(BackendResponse {
            text: text.clone(),
            latency: self.latency,
            backend_id: self.id.clone(),
            raw: None,
        })
    }

    fn id(&self) -> &str {
        &self.id
    }
}

/// Per-sample direct-memory annotation consumed by the oracle mock.
#[derive(Debug, Clone)]
pub struct DmAnnotation {
    pub hints: HintSet,
    pub gold: String,
}

/// Script a mock from ground-truth annotations.
///
/// DM prompts answer with the annotated hint serialization, IM prompts with
/// the frame's serialized store, and memory-augmented VQA prompts with the
/// gold answer — so a correct pipeline must score accuracy 1.0.
pub fn mock_from_annotations(
    store: &IndirectMemoryStore,
    dm_annotations: &HashMap<(FrameKey, String), DmAnnotation>,
) -> ScriptedMock {
    let mut mock = ScriptedMock::new();
    for (frame, _) in store.frames() {
        mock.register(frame.clone(), MockTask::Im, None, store.render_frame(frame));
    }
    for ((frame, question), ann) in dm_annotations {
        // Frames whose every question fell below the IM threshold still
        // need an IM response; script an empty one.
        if store.entries(frame).is_empty() {
            mock.register(frame.clone(), MockTask::Im, None, "");
        }
        mock.register(
            frame.clone(),
            MockTask::Dm,
            Some(question),
            ann.hints.render(),
        );
        mock.register(
            frame.clone(),
            MockTask::Mvqa,
            Some(question),
            ann.gold.clone(),
        );
        mock.register(
            frame.clone(),
            MockTask::Vqa,
            Some(question),
            ann.gold.clone(),
        );
    }
    mock
}

/// Fault-injection knobs for the chaos wrapper.
#[derive(Debug, Clone, Copy)]
pub struct ChaosConfig {
    /// Probability a response's memory text is garbled.
    pub malform_rate: f64,
    /// Probability a call fails with a transient transport error.
    pub fault_rate: f64,
    pub seed: u64,
}

/// Wraps a backend, corrupting responses and injecting transient faults at
/// configured rates. Faults are rolled per call, so retried requests may
/// succeed.
pub struct ChaosMock<B> {
    inner: B,
    config: ChaosConfig,
    rng: Mutex<ChaCha8Rng>,
    id: String,
}

impl<B: Backend> ChaosMock<B> {
    pub fn new(inner: B, config: ChaosConfig) -> Self {
        ChaosMock {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            id: format!("chaos:{}", inner.id()),
            inner,
            config,
        }
    }
}

impl<B: Backend> Backend for ChaosMock<B> {
    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let (fault, malform) = {
            let mut rng = self.rng.lock().expect("chaos rng poisoned");
            (
                rng.gen_bool(self.config.fault_rate),
                rng.gen_bool(self.config.malform_rate),
            )
        };
        if fault {
            return Err(BackendError::Retryable("injected transport fault".into()));
        }
        let mut resp = self.inner.complete(req)?;
        if malform {
            // Strip brackets so hint/memory lines no longer parse cleanly.
            resp.text = resp.text.replace(['[', ']'], "");
        }
        resp.backend_id = self.id.clone();
        Ok(resp)
    }

    fn id(&self) -> &str {
        &self.id
    }
}
