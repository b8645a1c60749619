//! Memory-augmented surgical VQA pipeline.
//!
//! The library ingests surgical VQA corpora, annotates two kinds of memory
//! from the training split (direct memory: per-question answer hints;
//! indirect memory: per-frame question-hint pairs), retrieves the most
//! relevant indirect memory per query via TF-IDF cosine, renders the four
//! canonical prompt templates, drives a three-stage inference pipeline
//! against a pluggable model backend, exports instruction-tuning records,
//! and scores predictions.

pub mod annotation;
pub mod backend;
pub mod config;
pub mod dataset;
pub mod exporter;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod retrieval;

pub use dataset::{DatasetId, FrameKey, Sample, SampleSet, Split};
