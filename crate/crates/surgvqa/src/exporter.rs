//! Instruction-tuning record export.
//!
//! Three record kinds mirror the three training objectives: hint generation
//! (one per eligible sample), indirect-memory generation (one per frame
//! with annotated entries, targeting the full serialized store), and
//! memory-augmented VQA (one per eligible sample, embedding the top-c
//! selected entries where c is drawn uniformly from [1, M] by a seeded
//! generator). Prompts are rendered by the same templates as inference, so
//! exported bytes and inference-time prompts are interchangeable.
//!
//! The RNG is ChaCha8 seeded with the configured 64-bit seed; records are
//! emitted in sample order, so identical inputs and seed give identical
//! bytes.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{
    annotate_direct_memory, AnswerFrequencyTable, ExclusionRules, HintSet, IndirectMemoryStore,
};
use crate::dataset::SampleSet;
use crate::prompting::{
    parse_entry_line, parse_hint_list, parse_indirect_memory, render_prompt, render_target,
    PromptTask, DM_INSTRUCTION, IM_INSTRUCTION,
};
use crate::retrieval::select_indirect_memory;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("missing annotations for {} sample(s): {}", offenders.len(), offenders.join(", "))]
    MissingAnnotations { offenders: Vec<String> },
    #[error("m must be at least 1 for export")]
    InvalidM,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ExportConfig {
    pub k: usize,
    pub m: usize,
    pub n: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordTask {
    Dm,
    Im,
    Mvqa,
}

/// One training record: the user-turn prompt and the loss-bearing
/// assistant-turn target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub task: RecordTask,
    pub image: String,
    pub prompt: String,
    pub target: String,
}

/// Emit the full record stream for a training split.
///
/// Per sample: a hint-generation record unless the question is excluded
/// from hint annotation, and a memory-augmented record unless the question
/// is excluded or its frame has no usable indirect memory after leakage
/// filtering. Per frame (at its first sample): an indirect-memory record
/// when the annotated store has entries for it.
pub fn export_training_records(
    train: &SampleSet,
    table: &AnswerFrequencyTable,
    store: &IndirectMemoryStore,
    config: &ExportConfig,
) -> Result<Vec<TrainingRecord>, ExportError> {
    if config.m == 0 {
        return Err(ExportError::InvalidM);
    }
    let rules = ExclusionRules::for_dataset(train.dataset);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::new();
    let mut offenders = Vec::new();
    let mut seen_frames = HashSet::new();

    for sample in train.samples() {
        let frame = sample.frame_key();
        if seen_frames.insert(frame.clone()) {
            let entries = store.entries(&frame);
            if !entries.is_empty() {
                let bundle = render_prompt(PromptTask::IndirectMemoryGen, &frame, None, None, None)
                    .expect("im prompt needs no fields");
                records.push(TrainingRecord {
                    task: RecordTask::Im,
                    image: sample.image.clone(),
                    prompt: bundle.rendered_text,
                    target: render_target(
                        PromptTask::IndirectMemoryGen,
                        &store.render_frame(&frame),
                    ),
                });
            }
        }

        let dm_excluded = rules.dm_excluded(&sample.question);
        let hints = if dm_excluded {
            HintSet::null()
        } else {
            match annotate_direct_memory(&sample.question, Some(&sample.answer), table, config.k) {
                Ok(hints) => hints,
                Err(_) => {
                    offenders.push(format!("{frame}/{}", sample.question));
                    continue;
                }
            }
        };

        if !dm_excluded {
            let bundle = render_prompt(
                PromptTask::DirectMemoryGen,
                &frame,
                Some(&sample.question),
                None,
                None,
            )
            .expect("question is present");
            records.push(TrainingRecord {
                task: RecordTask::Dm,
                image: sample.image.clone(),
                prompt: bundle.rendered_text,
                target: render_target(PromptTask::DirectMemoryGen, &hints.render()),
            });
        }

        if rules.mvqa_excluded(&sample.question, table) {
            continue;
        }
        let available =
            select_indirect_memory(&sample.question, store.entries(&frame), config.m, true);
        if available.is_empty() {
            continue;
        }
        let c = rng.gen_range(1..=config.m);
        let memory = &available[..c.min(available.len())];
        let bundle = render_prompt(
            PromptTask::MemoryAugmentedVqa,
            &frame,
            Some(&sample.question),
            Some(memory),
            Some(&hints),
        )
        .expect("all mvqa fields are present");
        records.push(TrainingRecord {
            task: RecordTask::Mvqa,
            image: sample.image.clone(),
            prompt: bundle.rendered_text,
            target: render_target(PromptTask::MemoryAugmentedVqa, &sample.answer),
        });
    }

    if !offenders.is_empty() {
        return Err(ExportError::MissingAnnotations { offenders });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Re-parse every record through the prompting parsers and check the
/// structural contracts: hint targets must be well-formed bracket lists,
/// indirect-memory targets must parse with no skipped lines, and
/// memory-augmented records must carry between 1 and `m` memory entries
/// with the gold answer among the question-line hints (records whose hint
/// list is the `[NULL]` sentinel are exempt from the gold check).
pub fn validate_records(records: &[TrainingRecord], m: usize) -> ValidationReport {
    let mut report = ValidationReport {
        checked: records.len(),
        ..ValidationReport::default()
    };
    let mut violate = |index: usize, reason: String| {
        report.violations.push(Violation { index, reason });
    };
    for (index, record) in records.iter().enumerate() {
        if !record.prompt.starts_with("<|user|>\n<image>\n") {
            violate(
                index,
                "prompt does not open with the user/image header".into(),
            );
            continue;
        }
        let target_body = record
            .target
            .strip_suffix("<|end|>")
            .unwrap_or(&record.target);
        match record.task {
            RecordTask::Dm => {
                if !record.prompt.contains(DM_INSTRUCTION) {
                    violate(index, "dm prompt lacks the hint instruction".into());
                    continue;
                }
                let parsed = parse_hint_list(target_body);
                if parsed.lenient || parsed.malformed {
                    violate(index, "dm target is not a bracketed hint list".into());
                } else if parsed.hints.is_empty() && !parsed.hints.is_null_sentinel() {
                    violate(index, "dm target carries no hints".into());
                }
            }
            RecordTask::Im => {
                if !record.prompt.contains(IM_INSTRUCTION) {
                    violate(index, "im prompt lacks the inquiry instruction".into());
                    continue;
                }
                let parsed = parse_indirect_memory(target_body);
                if parsed.skipped_lines > 0 {
                    violate(
                        index,
                        format!("im target has {} unparseable line(s)", parsed.skipped_lines),
                    );
                } else if parsed.entries.is_empty() {
                    violate(index, "im target carries no entries".into());
                }
            }
            RecordTask::Mvqa => match parse_mvqa_prompt(&record.prompt) {
                Err(reason) => violate(index, reason),
                Ok((memory_lines, question_hints)) => {
                    if memory_lines.is_empty() || memory_lines.len() > m {
                        violate(
                            index,
                            format!(
                                "mvqa memory entry count {} outside [1, {m}]",
                                memory_lines.len()
                            ),
                        );
                        continue;
                    }
                    if let Some(bad) = memory_lines.iter().find(|l| parse_entry_line(l).is_none()) {
                        violate(index, format!("mvqa memory line does not parse: {bad:?}"));
                        continue;
                    }
                    if !question_hints.is_null_sentinel()
                        && !question_hints.contains(target_body.trim())
                    {
                        violate(
                            index,
                            format!(
                                "gold {:?} absent from question-line hints {}",
                                target_body.trim(),
                                question_hints.render()
                            ),
                        );
                    }
                }
            },
        }
    }
    report
}

/// Memory lines and question-line hints out of a rendered MVQA prompt.
fn parse_mvqa_prompt(prompt: &str) -> Result<(Vec<String>, HintSet), String> {
    let mut lines = prompt.lines();
    let mut memory_lines = Vec::new();
    loop {
        match lines.next() {
            Some("Memory:") => break,
            Some(_) => continue,
            None => return Err("mvqa prompt has no Memory: marker".into()),
        }
    }
    loop {
        match lines.next() {
            Some("Question:") => break,
            Some(line) => memory_lines.push(line.to_string()),
            None => return Err("mvqa prompt has no Question: marker".into()),
        }
    }
    let qline = lines
        .next()
        .ok_or_else(|| "mvqa prompt ends before the question line".to_string())?;
    let qline = qline.trim_end_matches("<|end|>");
    let open = qline
        .rfind('[')
        .ok_or_else(|| "question line carries no hint list".to_string())?;
    let parsed = parse_hint_list(&qline[open..]);
    if parsed.lenient || parsed.malformed {
        return Err("question-line hints are not a bracketed list".into());
    }
    Ok((memory_lines, parsed.hints))
}

pub fn save_records(records: &[TrainingRecord], path: &Path) -> Result<(), ExportError> {
    let mut out = fs::File::create(path)?;
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<TrainingRecord>, ExportError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let file_label = path.display().to_string();
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrainingRecord =
            serde_json::from_str(&line).map_err(|e| ExportError::Parse {
                file: file_label.clone(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        out.push(record);
    }
    Ok(out)
}

/// The c-values a given seed produces, in emission order. Exposed so tests
/// and downstream trainers can pin the sampled memory sizes.
pub fn sampled_entry_counts(records: &[TrainingRecord]) -> Vec<usize> {
    records
        .iter()
        .filter(|r| r.task == RecordTask::Mvqa)
        .filter_map(|r| parse_mvqa_prompt(&r.prompt).ok())
        .map(|(memory, _)| memory.len())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{annotate_indirect_memory, build_frequency_table};
    use crate::dataset::{DatasetId, Sample, Split};

    fn sample(dataset: DatasetId, video: &str, frame: &str, q: &str, a: &str) -> Sample {
        Sample {
            dataset,
            split: Split::Train,
            video: video.into(),
            frame: frame.into(),
            image: format!("{video}/left_frames/{frame}.png"),
            question: q.into(),
            answer: a.into(),
        }
    }

    fn endovis_fixture() -> SampleSet {
        let mut samples = Vec::new();
        for f in 0..6 {
            let frame = format!("frame{f:03}");
            samples.push(sample(
                DatasetId::EndoVis18,
                "seq_1",
                &frame,
                "Where is bipolar forceps located?",
                if f % 2 == 0 {
                    "left-top"
                } else {
                    "left-bottom"
                },
            ));
            samples.push(sample(
                DatasetId::EndoVis18,
                "seq_1",
                &frame,
                "What is the state of bipolar forceps?",
                "Idle",
            ));
            samples.push(sample(
                DatasetId::EndoVis18,
                "seq_1",
                &frame,
                "Where is prograsp forceps located?",
                "right-top",
            ));
        }
        SampleSet::from_samples(DatasetId::EndoVis18, Split::Train, samples).unwrap()
    }

    fn export_fixture(
        set: &SampleSet,
        config: &ExportConfig,
    ) -> Result<Vec<TrainingRecord>, ExportError> {
        let table = build_frequency_table(set).unwrap();
        let rules = ExclusionRules::for_dataset(set.dataset);
        let store = annotate_indirect_memory(set, &table, config.n, config.k, &rules).unwrap();
        export_training_records(set, &table, &store, config)
    }

    #[test]
    fn export_is_deterministic_for_a_fixed_seed() {
        let set = endovis_fixture();
        let config = ExportConfig {
            k: 2,
            m: 3,
            n: 1,
            seed: 42,
        };
        let first = export_fixture(&set, &config).unwrap();
        let second = export_fixture(&set, &config).unwrap();
        assert_eq!(first, second);
        let bytes_a = first
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect::<Vec<_>>();
        let bytes_b = second
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect::<Vec<_>>();
        assert_eq!(bytes_a, bytes_b);
    }

    // Four distinct questions per frame so three candidates survive
    // leakage filtering and every sampled c in [1, 3] is observable.
    fn wide_frame_fixture() -> SampleSet {
        let mut samples = Vec::new();
        for f in 0..3 {
            let frame = format!("frame{f:03}");
            for tool in ["bipolar forceps", "prograsp forceps"] {
                samples.push(sample(
                    DatasetId::EndoVis18,
                    "seq_1",
                    &frame,
                    &format!("Where is {tool} located?"),
                    "left-top",
                ));
                samples.push(sample(
                    DatasetId::EndoVis18,
                    "seq_1",
                    &frame,
                    &format!("What is the state of {tool}?"),
                    "Idle",
                ));
            }
        }
        SampleSet::from_samples(DatasetId::EndoVis18, Split::Train, samples).unwrap()
    }

    #[test]
    fn sampled_counts_reproduce_the_seeded_generator_sequence() {
        // First draws of ChaCha8Rng::seed_from_u64(seed).gen_range(1..=3).
        let documented: [(u64, [usize; 10]); 3] = [
            (1, [2, 1, 1, 3, 2, 1, 3, 3, 2, 2]),
            (2, [3, 2, 3, 3, 1, 3, 1, 1, 1, 3]),
            (3, [1, 1, 3, 1, 1, 1, 3, 2, 3, 3]),
        ];
        let set = wide_frame_fixture();
        for (seed, expected) in documented {
            let config = ExportConfig {
                k: 2,
                m: 3,
                n: 1,
                seed,
            };
            let records = export_fixture(&set, &config).unwrap();
            let counts = sampled_entry_counts(&records);
            assert!(counts.len() >= expected.len());
            assert_eq!(&counts[..expected.len()], &expected, "seed {seed}");
        }
    }

    #[test]
    fn different_seeds_change_the_sampled_counts() {
        let set = endovis_fixture();
        let counts: Vec<Vec<usize>> = [1u64, 2, 3]
            .iter()
            .map(|&seed| {
                let config = ExportConfig {
                    k: 2,
                    m: 3,
                    n: 1,
                    seed,
                };
                sampled_entry_counts(&export_fixture(&set, &config).unwrap())
            })
            .collect();
        assert!(counts
            .iter()
            .all(|c| c.iter().all(|&x| (1..=3).contains(&x))));
        // At least one pair of seeds must disagree somewhere.
        assert!(counts[0] != counts[1] || counts[1] != counts[2]);
    }

    #[test]
    fn record_counts_follow_eligibility() {
        let set = endovis_fixture();
        let config = ExportConfig {
            k: 2,
            m: 3,
            n: 1,
            seed: 7,
        };
        let records = export_fixture(&set, &config).unwrap();
        let count = |task: RecordTask| records.iter().filter(|r| r.task == task).count();
        // EndoVis has no exclusions: every sample yields a DM record, every
        // frame has entries, and every sample has usable memory (each frame
        // carries three distinct questions).
        assert_eq!(count(RecordTask::Dm), set.len());
        assert_eq!(count(RecordTask::Im), set.frames().len());
        assert_eq!(count(RecordTask::Mvqa), set.len());
    }

    #[test]
    fn cholec80_binary_questions_emit_no_dm_record() {
        let mut samples = Vec::new();
        for f in 0..3 {
            let frame = format!("f{f}");
            samples.push(sample(
                DatasetId::Cholec80,
                "video01",
                &frame,
                "Is irrigator used in calot triangle dissection?",
                if f == 0 { "yes" } else { "no" },
            ));
            samples.push(sample(
                DatasetId::Cholec80,
                "video01",
                &frame,
                "What is the phase of image?",
                if f == 0 {
                    "preparation"
                } else {
                    "calot triangle dissection"
                },
            ));
        }
        let set = SampleSet::from_samples(DatasetId::Cholec80, Split::Train, samples).unwrap();
        let config = ExportConfig {
            k: 2,
            m: 1,
            n: 1,
            seed: 9,
        };
        let records = export_fixture(&set, &config).unwrap();
        assert!(records
            .iter()
            .filter(|r| r.task == RecordTask::Dm)
            .all(|r| !r.prompt.contains("Is irrigator")));
        // Binary questions still get MVQA records, with [NULL] hints.
        let mvqa_binary: Vec<&TrainingRecord> = records
            .iter()
            .filter(|r| r.task == RecordTask::Mvqa && r.prompt.contains("Question:\nIs irrigator"))
            .collect();
        assert!(!mvqa_binary.is_empty());
        assert!(mvqa_binary
            .iter()
            .all(|r| r.prompt.contains("dissection? [NULL]")));
        assert!(validate_records(&records, config.m).is_clean());
    }

    #[test]
    fn validation_passes_on_clean_export() {
        let set = endovis_fixture();
        let config = ExportConfig {
            k: 2,
            m: 3,
            n: 1,
            seed: 11,
        };
        let records = export_fixture(&set, &config).unwrap();
        let report = validate_records(&records, config.m);
        assert!(report.is_clean(), "violations: {:?}", report.violations);
        assert_eq!(report.checked, records.len());
    }

    #[test]
    fn corrupted_hint_bracket_is_flagged_at_its_index() {
        let set = endovis_fixture();
        let config = ExportConfig {
            k: 2,
            m: 3,
            n: 1,
            seed: 13,
        };
        let mut records = export_fixture(&set, &config).unwrap();
        let idx = records
            .iter()
            .position(|r| r.task == RecordTask::Dm)
            .unwrap();
        records[idx].target = records[idx].target.replace(['[', ']'], "");
        let report = validate_records(&records, config.m);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].index, idx);
    }

    #[test]
    fn mvqa_with_zero_entries_is_a_violation() {
        let set = endovis_fixture();
        let config = ExportConfig {
            k: 2,
            m: 3,
            n: 1,
            seed: 17,
        };
        let mut records = export_fixture(&set, &config).unwrap();
        let idx = records
            .iter()
            .position(|r| r.task == RecordTask::Mvqa)
            .unwrap();
        // Cut the memory block down to nothing.
        let prompt = &records[idx].prompt;
        let start = prompt.find("Memory:\n").unwrap() + "Memory:\n".len();
        let end = prompt.find("Question:\n").unwrap();
        let mut emptied = String::new();
        emptied.push_str(&prompt[..start]);
        emptied.push_str(&prompt[end..]);
        records[idx].prompt = emptied;
        let report = validate_records(&records, config.m);
        assert!(report
            .violations
            .iter()
            .any(|v| v.index == idx && v.reason.contains("outside [1, 3]")));
    }

    #[test]
    fn jsonl_round_trip() {
        let set = endovis_fixture();
        let config = ExportConfig {
            k: 2,
            m: 3,
            n: 1,
            seed: 19,
        };
        let records = export_fixture(&set, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        save_records(&records, &path).unwrap();
        assert_eq!(load_records(&path).unwrap(), records);
    }

    #[test]
    fn mvqa_prompts_byte_equal_inference_renders() {
        let set = endovis_fixture();
        let config = ExportConfig {
            k: 2,
            m: 3,
            n: 1,
            seed: 23,
        };
        let table = build_frequency_table(&set).unwrap();
        let rules = ExclusionRules::for_dataset(set.dataset);
        let store = annotate_indirect_memory(&set, &table, config.n, config.k, &rules).unwrap();
        let records = export_training_records(&set, &table, &store, &config).unwrap();
        // Re-render the first MVQA record from its parsed pieces and compare.
        let record = records.iter().find(|r| r.task == RecordTask::Mvqa).unwrap();
        let (memory_lines, hints) = parse_mvqa_prompt(&record.prompt).unwrap();
        let memory: Vec<_> = memory_lines
            .iter()
            .map(|l| parse_entry_line(l).unwrap())
            .collect();
        let question_line = record
            .prompt
            .lines()
            .skip_while(|l| *l != "Question:")
            .nth(1)
            .unwrap();
        let question = question_line[..question_line.rfind('[').unwrap()].trim();
        let frame = crate::dataset::FrameKey::new("seq_1", "frame000");
        let rerendered = render_prompt(
            PromptTask::MemoryAugmentedVqa,
            &frame,
            Some(question),
            Some(&memory),
            Some(&hints),
        )
        .unwrap();
        assert_eq!(rerendered.rendered_text, record.prompt);
    }
}
