//! Canonical prompt rendering and model-output parsing.
//!
//! Four templates cover the pipeline's tasks. Rendering is byte-exact and
//! pinned by golden-file tests: role markers `<|user|>` / `<|assistant|>` /
//! `<|end|>`, the `<image>` placeholder on its own line, memory entries one
//! per line as `Question [Hints]`, a `, ` hint separator. Parsers are total
//! over arbitrary UTF-8: malformed input degrades to flagged best-effort
//! results instead of failing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{HintSet, IndirectMemoryEntry, NULL_SENTINEL};
use crate::dataset::FrameKey;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("{task:?} requires {field}")]
    MissingField {
        task: PromptTask,
        field: &'static str,
    },
}

/// The four prompt templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTask {
    VanillaVqa,
    DirectMemoryGen,
    IndirectMemoryGen,
    MemoryAugmentedVqa,
}

impl PromptTask {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptTask::VanillaVqa => "vanilla_vqa",
            PromptTask::DirectMemoryGen => "dm",
            PromptTask::IndirectMemoryGen => "im",
            PromptTask::MemoryAugmentedVqa => "mvqa",
        }
    }
}

/// Instruction appended to the question for hint generation.
pub const DM_INSTRUCTION: &str = "Generate some hints for the answer.";
/// Standing instruction for self-contained scene inquiry.
pub const IM_INSTRUCTION: &str =
    "Generate a list of relevant questions with hints based on the provided surgical image.";

const USER: &str = "<|user|>";
const ASSISTANT: &str = "<|assistant|>";
const END: &str = "<|end|>";
const IMAGE: &str = "<image>";

/// A fully rendered prompt for one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub task: PromptTask,
    pub rendered_text: String,
    pub image_ref: FrameKey,
}

/// Render one task's user turn, ending with the assistant marker ready for
/// the model (or the training target) to continue.
pub fn render_prompt(
    task: PromptTask,
    image_ref: &FrameKey,
    question: Option<&str>,
    memory: Option<&[IndirectMemoryEntry]>,
    hints: Option<&HintSet>,
) -> Result<PromptBundle, RenderError> {
    let need_question = || {
        question.ok_or(RenderError::MissingField {
            task,
            field: "question",
        })
    };
    let body = match task {
        PromptTask::VanillaVqa => format!("{}{END}", need_question()?),
        PromptTask::DirectMemoryGen => format!("{} {DM_INSTRUCTION}{END}", need_question()?),
        PromptTask::IndirectMemoryGen => format!("{IM_INSTRUCTION}{END}"),
        PromptTask::MemoryAugmentedVqa => {
            let question = need_question()?;
            let memory = memory.ok_or(RenderError::MissingField {
                task,
                field: "memory",
            })?;
            let hints = hints.ok_or(RenderError::MissingField {
                task,
                field: "hints",
            })?;
            let mut block = String::from("Memory:\n");
            for entry in memory {
                block.push_str(&entry.render());
                block.push('\n');
            }
            block.push_str("Question:\n");
            block.push_str(&format!("{question} {}{END}", hints.render()));
            block
        }
    };
    Ok(PromptBundle {
        task,
        rendered_text: format!("{USER}\n{IMAGE}\n{body}\n{ASSISTANT}\n"),
        image_ref: image_ref.clone(),
    })
}

/// The assistant-turn text paired with each prompt in training records.
pub fn render_target(task: PromptTask, answer: &str) -> String {
    let _ = task;
    format!("{answer}{END}")
}

/// Result of parsing a hint list out of model text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HintParse {
    pub hints: HintSet,
    /// No bracketed list was found; the whole trimmed line was taken as a
    /// single hint.
    pub lenient: bool,
    /// Nothing parseable at all.
    pub malformed: bool,
}

fn strip_markers(text: &str) -> &str {
    let mut t = text.trim();
    for marker in [END, ASSISTANT, USER] {
        t = t.trim_end_matches(marker).trim();
    }
    t
}

/// Parse `[h1, h2]` out of arbitrary text. Surrounding prose is ignored;
/// `[NULL]` yields the empty null-flagged set; with no bracket match the
/// whole trimmed line becomes a single hint (lenient, flagged). Never fails.
pub fn parse_hint_list(text: &str) -> HintParse {
    let stripped = strip_markers(text);
    if stripped.is_empty() {
        return HintParse {
            hints: HintSet::empty(),
            lenient: false,
            malformed: true,
        };
    }
    if let Some(inner) = bracket_group(stripped) {
        if inner.trim() == NULL_SENTINEL {
            return HintParse {
                hints: HintSet::null(),
                lenient: false,
                malformed: false,
            };
        }
        let labels: Vec<String> = inner
            .split(',')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        return HintParse {
            hints: HintSet::new(labels),
            lenient: false,
            malformed: false,
        };
    }
    HintParse {
        hints: HintSet::new(vec![stripped.to_string()]),
        lenient: true,
        malformed: false,
    }
}

fn bracket_group(text: &str) -> Option<&str> {
    let open = text.find('[')?;
    let close = text[open + 1..].find(']')? + open + 1;
    Some(&text[open + 1..close])
}

/// Result of parsing an indirect-memory block.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImParse {
    pub entries: Vec<IndirectMemoryEntry>,
    /// Lines that did not match `<question ending in '?'> [<hints>]`.
    pub skipped_lines: usize,
}

/// Parse newline-separated `Question [Hints]` lines. Lines failing the
/// grammar are skipped and counted, never fatal.
pub fn parse_indirect_memory(text: &str) -> ImParse {
    let mut out = ImParse::default();
    for line in strip_markers(text).lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match parse_entry_line(line) {
            Some(entry) => out.entries.push(entry),
            None => out.skipped_lines += 1,
        }
    }
    out
}

/// One `Question [Hints]` line, or None if the grammar does not match.
pub fn parse_entry_line(line: &str) -> Option<IndirectMemoryEntry> {
    let open = line.find('[')?;
    let question = line[..open].trim();
    if question.is_empty() || !question.ends_with('?') {
        return None;
    }
    let parsed = parse_hint_list(&line[open..]);
    if parsed.lenient || parsed.malformed {
        return None;
    }
    Some(IndirectMemoryEntry {
        question: question.to_string(),
        hints: parsed.hints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame() -> FrameKey {
        FrameKey::new("seq_1", "frame000")
    }

    fn entry(q: &str, hints: &[&str]) -> IndirectMemoryEntry {
        IndirectMemoryEntry {
            question: q.into(),
            hints: HintSet::new(hints.iter().map(|s| s.to_string()).collect()),
        }
    }

    #[test]
    fn dm_prompt_ends_with_instruction() {
        let bundle = render_prompt(
            PromptTask::DirectMemoryGen,
            &frame(),
            Some("What is the state of prograsp forceps?"),
            None,
            None,
        )
        .unwrap();
        assert_eq!(
            bundle.rendered_text,
            "<|user|>\n<image>\nWhat is the state of prograsp forceps? Generate some hints for the answer.<|end|>\n<|assistant|>\n"
        );
    }

    #[test]
    fn im_prompt_carries_standing_instruction() {
        let bundle =
            render_prompt(PromptTask::IndirectMemoryGen, &frame(), None, None, None).unwrap();
        assert!(bundle
            .rendered_text
            .contains("Generate a list of relevant questions with hints based on the provided surgical image."));
        assert!(bundle.rendered_text.starts_with("<|user|>\n<image>\n"));
    }

    #[test]
    fn mvqa_prompt_layout() {
        let memory = vec![
            entry(
                "Where is prograsp forceps located?",
                &["left-top", "right-top"],
            ),
            entry(
                "What is the state of bipolar forceps?",
                &["Idle", "Tissue Manipulation"],
            ),
        ];
        let hints = HintSet::new(vec!["Idle".into(), "Tissue Manipulation".into()]);
        let bundle = render_prompt(
            PromptTask::MemoryAugmentedVqa,
            &frame(),
            Some("What is the state of prograsp forceps?"),
            Some(&memory),
            Some(&hints),
        )
        .unwrap();
        let expected = "<|user|>\n<image>\nMemory:\nWhere is prograsp forceps located? [left-top, right-top]\nWhat is the state of bipolar forceps? [Idle, Tissue Manipulation]\nQuestion:\nWhat is the state of prograsp forceps? [Idle, Tissue Manipulation]<|end|>\n<|assistant|>\n";
        assert_eq!(bundle.rendered_text, expected);
    }

    #[test]
    fn mvqa_with_empty_memory_keeps_markers() {
        let memory: Vec<IndirectMemoryEntry> = Vec::new();
        let hints = HintSet::empty();
        let bundle = render_prompt(
            PromptTask::MemoryAugmentedVqa,
            &frame(),
            Some("Q?"),
            Some(&memory),
            Some(&hints),
        )
        .unwrap();
        assert!(bundle.rendered_text.contains("Memory:\nQuestion:\n"));
        assert!(bundle.rendered_text.contains("Q? []<|end|>"));
    }

    #[test]
    fn missing_required_field_is_a_render_error() {
        let err =
            render_prompt(PromptTask::DirectMemoryGen, &frame(), None, None, None).unwrap_err();
        assert!(matches!(
            err,
            RenderError::MissingField {
                field: "question",
                ..
            }
        ));
        let err = render_prompt(
            PromptTask::MemoryAugmentedVqa,
            &frame(),
            Some("Q?"),
            None,
            None,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            RenderError::MissingField {
                field: "memory",
                ..
            }
        ));
    }

    #[test]
    fn parse_hint_list_basic() {
        let parsed = parse_hint_list("[Idle, Tissue Manipulation]");
        assert_eq!(parsed.hints.labels(), ["Idle", "Tissue Manipulation"]);
        assert!(!parsed.lenient && !parsed.malformed);
    }

    #[test]
    fn parse_hint_list_null_sentinel() {
        let parsed = parse_hint_list("[NULL]");
        assert!(parsed.hints.is_null_sentinel());
        assert!(parsed.hints.is_empty());
        assert!(!parsed.malformed);
    }

    #[test]
    fn parse_hint_list_empty_input_is_malformed() {
        let parsed = parse_hint_list("");
        assert!(parsed.hints.is_empty());
        assert!(parsed.malformed);
    }

    #[test]
    fn parse_hint_list_lenient_fallback() {
        let parsed = parse_hint_list("Tissue Manipulation");
        assert_eq!(parsed.hints.labels(), ["Tissue Manipulation"]);
        assert!(parsed.lenient);
    }

    #[test]
    fn parse_hint_list_ignores_surrounding_text_and_end_marker() {
        let parsed = parse_hint_list("Sure! Here you go: [left-top, left-bottom]<|end|>");
        assert_eq!(parsed.hints.labels(), ["left-top", "left-bottom"]);
    }

    #[test]
    fn parse_indirect_memory_two_lines() {
        let text = "Where is prograsp forceps located? [left-top, right-top]\nWhat is the state of bipolar forceps? [Idle, Tissue Manipulation]";
        let parsed = parse_indirect_memory(text);
        assert_eq!(parsed.entries.len(), 2);
        assert_eq!(parsed.skipped_lines, 0);
        assert_eq!(
            parsed.entries[0].question,
            "Where is prograsp forceps located?"
        );
        assert_eq!(
            parsed.entries[1].hints.labels(),
            ["Idle", "Tissue Manipulation"]
        );
    }

    #[test]
    fn parse_indirect_memory_empty_text() {
        let parsed = parse_indirect_memory("");
        assert!(parsed.entries.is_empty());
        assert_eq!(parsed.skipped_lines, 0);
    }

    #[test]
    fn parse_indirect_memory_skips_bad_lines() {
        let text = "no question mark here [a, b]\nWhere is it? [left-top]";
        let parsed = parse_indirect_memory(text);
        assert_eq!(parsed.entries.len(), 1);
        assert_eq!(parsed.skipped_lines, 1);
    }

    #[test]
    fn entry_round_trips_through_render_and_parse() {
        let original = entry(
            "Where is bipolar forceps located?",
            &["left-top", "left-bottom"],
        );
        let parsed = parse_entry_line(&original.render()).unwrap();
        assert_eq!(parsed, original);
    }

    proptest! {
        #[test]
        fn parsers_are_total_over_arbitrary_text(text in ".*") {
            let _ = parse_hint_list(&text);
            let _ = parse_indirect_memory(&text);
        }

        #[test]
        fn well_formed_entries_round_trip(
            stem in "[A-Za-z][A-Za-z ]{0,30}",
            labels in proptest::collection::vec("[A-Za-z][A-Za-z-]{0,10}", 1..4)
        ) {
            let question = format!("{}?", stem.trim());
            prop_assume!(labels != vec![NULL_SENTINEL.to_string()]);
            let entry = IndirectMemoryEntry {
                question: crate::dataset::normalize_question(&question),
                hints: HintSet::new(labels),
            };
            let parsed = parse_entry_line(&entry.render()).unwrap();
            prop_assert_eq!(parsed, entry);
        }
    }
}
