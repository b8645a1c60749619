//! Shared fixtures for the integration and acceptance suites: seeded
//! synthetic corpora that mimic the real datasets' question templates, and
//! an oracle backend scripted from ground-truth annotations.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use surgvqa::annotation::{
    annotate_direct_memory, annotate_indirect_memory, build_frequency_table, AnswerFrequencyTable,
    ExclusionRules, IndirectMemoryStore,
};
use surgvqa::backend::{mock_from_annotations, DmAnnotation, ScriptedMock};
use surgvqa::dataset::{normalize_question, DatasetId, FrameKey, Sample, SampleSet, Split};

pub const TOOLS: &[&str] = &[
    "bipolar forceps",
    "prograsp forceps",
    "monopolar curved scissors",
    "ultrasound probe",
    "suction instrument",
    "clip applier",
    "grasping retractor",
    "stapler",
];

const STATES: &[&str] = &[
    "Idle",
    "Grasping",
    "Retraction",
    "Tissue_Manipulation",
    "Tool_Manipulation",
    "Cutting",
    "Cauterization",
    "Suction",
];

const LOCATIONS: &[&str] = &["left-top", "right-top", "left-bottom", "right-bottom"];

const PHASES: &[&str] = &[
    "preparation",
    "calot triangle dissection",
    "gallbladder dissection",
    "clipping cutting",
];

/// Seeded EndoVis-style corpus: per frame, a location and a state question
/// for a few tools. Question texts repeat across frames, giving realistic
/// per-question answer pools.
pub fn synth_endovis(n_videos: usize, frames_per_video: usize, seed: u64) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for v in 0..n_videos {
        let video = format!("seq_{}", v + 1);
        for f in 0..frames_per_video {
            let frame = format!("frame{f:03}");
            let mut tools: Vec<&str> = TOOLS.to_vec();
            tools.shuffle(&mut rng);
            let n_tools = rng.gen_range(1..=2);
            for tool in tools.iter().take(n_tools) {
                samples.push(Sample {
                    dataset: DatasetId::EndoVis18,
                    split: Split::Train,
                    video: video.clone(),
                    frame: frame.clone(),
                    image: format!("{video}/left_frames/{frame}.png"),
                    question: format!("Where is {tool} located?"),
                    answer: LOCATIONS[rng.gen_range(0..LOCATIONS.len())].to_string(),
                });
                samples.push(Sample {
                    dataset: DatasetId::EndoVis18,
                    split: Split::Train,
                    video: video.clone(),
                    frame: frame.clone(),
                    image: format!("{video}/left_frames/{frame}.png"),
                    question: format!("What is the state of {tool}?"),
                    answer: STATES[rng.gen_range(0..STATES.len())].to_string(),
                });
            }
        }
    }
    SampleSet::from_samples(DatasetId::EndoVis18, Split::Train, samples).unwrap()
}

/// Seeded Cholec80-style corpus: a phase question plus a binary tool
/// question per frame, occasionally a count question.
pub fn synth_cholec80(n_videos: usize, frames_per_video: usize, seed: u64) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let tools = ["irrigator", "hook", "specimen bag", "grasper"];
    for v in 0..n_videos {
        let video = format!("video{:02}", v + 1);
        for f in 0..frames_per_video {
            let frame = format!("{f:06}");
            let phase = PHASES[rng.gen_range(0..PHASES.len())];
            samples.push(Sample {
                dataset: DatasetId::Cholec80,
                split: Split::Train,
                video: video.clone(),
                frame: frame.clone(),
                image: format!("{video}/frames/{frame}.png"),
                question: "What is the phase of image?".into(),
                answer: phase.to_string(),
            });
            let tool = tools[rng.gen_range(0..tools.len())];
            samples.push(Sample {
                dataset: DatasetId::Cholec80,
                split: Split::Train,
                video: video.clone(),
                frame: frame.clone(),
                image: format!("{video}/frames/{frame}.png"),
                question: format!("Is {tool} used in calot triangle dissection?"),
                answer: if rng.gen_bool(0.5) { "yes" } else { "no" }.to_string(),
            });
            if rng.gen_bool(0.3) {
                samples.push(Sample {
                    dataset: DatasetId::Cholec80,
                    split: Split::Train,
                    video: video.clone(),
                    frame: frame.clone(),
                    image: format!("{video}/frames/{frame}.png"),
                    question: "How many tools are used in the image?".into(),
                    answer: rng.gen_range(0..=3).to_string(),
                });
            }
        }
    }
    SampleSet::from_samples(DatasetId::Cholec80, Split::Train, samples).unwrap()
}

pub struct Oracle {
    pub mock: ScriptedMock,
    pub store: IndirectMemoryStore,
    pub table: AnswerFrequencyTable,
}

/// Annotate a set and script a mock from the annotations: the mock replays
/// annotated hints, the annotated store, and gold answers.
pub fn oracle_backend(set: &SampleSet, k: usize, n: u64) -> Oracle {
    let table = build_frequency_table(set).unwrap();
    let rules = ExclusionRules::for_dataset(set.dataset);
    let store = annotate_indirect_memory(set, &table, n, k, &rules).unwrap();
    let mut dm: HashMap<(FrameKey, String), DmAnnotation> = HashMap::new();
    for sample in set.samples() {
        let hints = if rules.dm_excluded(&sample.question) {
            surgvqa::annotation::HintSet::null()
        } else {
            annotate_direct_memory(&sample.question, Some(&sample.answer), &table, k).unwrap()
        };
        dm.insert(
            (sample.frame_key(), normalize_question(&sample.question)),
            DmAnnotation {
                hints,
                gold: sample.answer.clone(),
            },
        );
    }
    Oracle {
        mock: mock_from_annotations(&store, &dm),
        store,
        table,
    }
}
