//! Audit contract of the run trace: every backend request appears exactly
//! once, with a distinct request id and the prompt hash of what was sent.

mod common;

use std::collections::HashSet;

use surgvqa::dataset::DatasetId;
use surgvqa::pipeline::{run_split, InferConfig, RunOptions};

use common::{oracle_backend, synth_endovis};

#[derive(serde::Deserialize)]
struct TraceLine {
    request_id: String,
    frame: String,
    task: String,
    prompt_hash: String,
    response_text: String,
    latency_ms: u64,
}

#[test]
fn trace_covers_every_backend_call_exactly_once() {
    let set = synth_endovis(2, 10, 1234);
    let oracle = oracle_backend(&set, 2, 1);
    let config = InferConfig::defaults(DatasetId::EndoVis18);
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("trace.jsonl");
    let options = RunOptions {
        parallelism: 4,
        trace: Some(trace_path.clone()),
        ..RunOptions::default()
    };
    run_split(&set, &oracle.mock, &config, &options).unwrap();

    let text = std::fs::read_to_string(&trace_path).unwrap();
    let lines: Vec<TraceLine> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();

    // One DM + one MVQA call per sample, one IM call per frame.
    let expected = set.len() * 2 + set.frames().len();
    assert_eq!(lines.len(), expected);

    let ids: HashSet<&str> = lines.iter().map(|l| l.request_id.as_str()).collect();
    assert_eq!(ids.len(), lines.len(), "request ids must be unique");

    let im_calls = lines.iter().filter(|l| l.task == "im").count();
    assert_eq!(im_calls, set.frames().len());
    assert!(lines.iter().all(|l| l.prompt_hash.len() == 64));
    assert!(lines.iter().all(|l| !l.frame.is_empty()));
    // The oracle mock reports zero latency and non-empty memory replies.
    assert!(lines.iter().all(|l| l.latency_ms == 0));
    assert!(lines
        .iter()
        .filter(|l| l.task == "im")
        .all(|l| !l.response_text.is_empty()));
}
