//! Run configuration: defaults, config-file and environment overrides, and
//! the effective-config echo written into every output directory.
//!
//! Precedence is flags over environment over file over defaults. The file
//! format is plain `key = value` text; environment variables use the
//! `SURGVQA_` prefix with the key uppercased (`m` -> `SURGVQA_M`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backend::{DecodingParams, DecodingStrategy};
use crate::dataset::{parse_kv_file, DatasetId, CHOLEC80_PATTERNS, ENDOVIS_PATTERNS};
use crate::pipeline::InferConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("bad value for {key}: {value:?} ({reason})")]
    BadValue {
        key: &'static str,
        value: String,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

pub const ENV_PREFIX: &str = "SURGVQA_";

/// Every knob a run can carry. Defaults depend on the dataset.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: DatasetId,
    pub k: usize,
    pub m: usize,
    pub n: u64,
    pub seed: u64,
    pub parallelism: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
    pub max_failure_ratio: f64,
    pub dm_max_tokens: u32,
    pub im_max_tokens: u32,
    pub im_beam: u32,
    pub vqa_max_tokens: u32,
    pub backend_url: Option<String>,
    pub model: String,
    pub token_env: Option<String>,
    pub data_root: Option<PathBuf>,
    pub train_videos: Vec<String>,
    pub test_videos: Vec<String>,
}

impl RunConfig {
    pub fn defaults(dataset: DatasetId) -> Self {
        let infer = InferConfig::defaults(dataset);
        RunConfig {
            dataset,
            k: infer.k,
            m: infer.m,
            n: 500,
            seed: 0,
            parallelism: 1,
            max_retries: 3,
            backoff_ms: 250,
            timeout_ms: 120_000,
            max_failure_ratio: 0.1,
            dm_max_tokens: infer.dm_params.max_new_tokens,
            im_max_tokens: infer.im_params.max_new_tokens,
            im_beam: match infer.im_params.strategy {
                DecodingStrategy::Beam(w) => w,
                DecodingStrategy::Greedy => 1,
            },
            vqa_max_tokens: infer.vqa_params.max_new_tokens,
            backend_url: None,
            model: "default".into(),
            token_env: None,
            data_root: None,
            train_videos: Vec::new(),
            test_videos: Vec::new(),
        }
    }

    /// Apply `key = value` pairs from a config file, then any `SURGVQA_*`
    /// environment variables.
    pub fn load(dataset: DatasetId, file: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = RunConfig::defaults(dataset);
        if let Some(path) = file {
            let map = parse_kv_file(path)?;
            for (key, value) in &map {
                config.apply(key, value)?;
            }
        }
        for key in KEYS {
            if let Ok(value) = std::env::var(format!("{ENV_PREFIX}{}", key.to_uppercase())) {
                config.apply(key, &value)?;
            }
        }
        Ok(config)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &'static str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key,
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        match key {
            "k" => self.k = parse("k", value)?,
            "m" => self.m = parse("m", value)?,
            "n" => self.n = parse("n", value)?,
            "seed" => self.seed = parse("seed", value)?,
            "parallelism" => self.parallelism = parse("parallelism", value)?,
            "max_retries" => self.max_retries = parse("max_retries", value)?,
            "backoff_ms" => self.backoff_ms = parse("backoff_ms", value)?,
            "timeout_ms" => self.timeout_ms = parse("timeout_ms", value)?,
            "max_failure_ratio" => self.max_failure_ratio = parse("max_failure_ratio", value)?,
            "dm_max_tokens" => self.dm_max_tokens = parse("dm_max_tokens", value)?,
            "im_max_tokens" => self.im_max_tokens = parse("im_max_tokens", value)?,
            "im_beam" => self.im_beam = parse("im_beam", value)?,
            "vqa_max_tokens" => self.vqa_max_tokens = parse("vqa_max_tokens", value)?,
            "backend_url" => self.backend_url = Some(value.to_string()),
            "model" => self.model = value.to_string(),
            "token_env" => self.token_env = Some(value.to_string()),
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "train_videos" => {
                self.train_videos = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "test_videos" => {
                self.test_videos = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            // Unknown keys are left for the caller's own sections.
            _ => {}
        }
        Ok(())
    }

    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            dataset: self.dataset,
            k: self.k,
            m: self.m,
            dm_params: DecodingParams::greedy(self.dm_max_tokens),
            im_params: if self.im_beam > 1 {
                DecodingParams::beam(self.im_max_tokens, self.im_beam)
            } else {
                DecodingParams::greedy(self.im_max_tokens)
            },
            vqa_params: DecodingParams::greedy(self.vqa_max_tokens),
        }
    }

    /// All effective settings, sorted, including the question-type
    /// patterns in force for the dataset.
    pub fn render_effective(&self) -> String {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        map.insert("dataset".into(), self.dataset.to_string());
        map.insert("k".into(), self.k.to_string());
        map.insert("m".into(), self.m.to_string());
        map.insert("n".into(), self.n.to_string());
        map.insert("seed".into(), self.seed.to_string());
        map.insert("parallelism".into(), self.parallelism.to_string());
        map.insert("max_retries".into(), self.max_retries.to_string());
        map.insert("backoff_ms".into(), self.backoff_ms.to_string());
        map.insert("timeout_ms".into(), self.timeout_ms.to_string());
        map.insert(
            "max_failure_ratio".into(),
            format!("{}", self.max_failure_ratio),
        );
        map.insert("dm_max_tokens".into(), self.dm_max_tokens.to_string());
        map.insert("im_max_tokens".into(), self.im_max_tokens.to_string());
        map.insert("im_beam".into(), self.im_beam.to_string());
        map.insert("vqa_max_tokens".into(), self.vqa_max_tokens.to_string());
        map.insert("model".into(), self.model.clone());
        if let Some(url) = &self.backend_url {
            map.insert("backend_url".into(), url.clone());
        }
        if let Some(env) = &self.token_env {
            map.insert("token_env".into(), env.clone());
        }
        if let Some(root) = &self.data_root {
            map.insert("data_root".into(), root.display().to_string());
        }
        if !self.train_videos.is_empty() {
            map.insert("train_videos".into(), self.train_videos.join(","));
        }
        if !self.test_videos.is_empty() {
            map.insert("test_videos".into(), self.test_videos.join(","));
        }
        let patterns = match self.dataset {
            DatasetId::EndoVis18 | DatasetId::EndoVis17 => ENDOVIS_PATTERNS,
            DatasetId::Cholec80 => CHOLEC80_PATTERNS,
        };
        map.insert(
            "question_type_patterns".into(),
            patterns
                .iter()
                .map(|(prefix, ty)| format!("{prefix:?}->{ty}"))
                .collect::<Vec<_>>()
                .join("; "),
        );
        let mut out = String::new();
        for (key, value) in map {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Write the effective configuration into an output directory.
    pub fn echo_into(&self, dir: &Path) -> Result<(), ConfigError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("effective_config.txt"), self.render_effective())?;
        Ok(())
    }
}

const KEYS: &[&str] = &[
    "k",
    "m",
    "n",
    "seed",
    "parallelism",
    "max_retries",
    "backoff_ms",
    "timeout_ms",
    "max_failure_ratio",
    "dm_max_tokens",
    "im_max_tokens",
    "im_beam",
    "vqa_max_tokens",
    "backend_url",
    "model",
    "token_env",
    "data_root",
    "train_videos",
    "test_videos",
];
