//! TF-IDF featurization and Top-M cosine selection of indirect memory.
//!
//! The model is fitted per frame over the query question plus that frame's
//! entry questions, so selection is independent across frames and fully
//! deterministic. Smooth idf (`ln((1+n)/(1+df)) + 1`) keeps every weight
//! positive; vectors are L2-normalized at transform time.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::annotation::IndirectMemoryEntry;
use crate::dataset::normalize_question;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot fit a TF-IDF model on an empty corpus")]
    EmptyCorpus,
}

/// Sparse vector with strictly increasing indices; unit L2 norm unless empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    pairs: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn pairs(&self) -> &[(usize, f64)] {
        &self.pairs
    }

    pub fn is_zero(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.pairs.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }
}

/// Vocabulary and idf weights learned from a fitted corpus.
#[derive(Debug, Clone)]
pub struct TfidfModel {
    vocabulary: BTreeMap<String, usize>,
    idf: Vec<f64>,
    n_docs: usize,
}

/// Lowercase, split on non-alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Fit vocabulary and idf weights. Token indices follow sorted token order,
/// so the model is independent of corpus ordering.
pub fn fit_tfidf(corpus: &[&str]) -> Result<TfidfModel, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus {
        let mut tokens = tokenize(doc);
        tokens.sort();
        tokens.dedup();
        for token in tokens {
            *df.entry(token).or_insert(0) += 1;
        }
    }
    let n_docs = corpus.len();
    let mut vocabulary = BTreeMap::new();
    let mut idf = Vec::with_capacity(df.len());
    for (i, (token, count)) in df.into_iter().enumerate() {
        idf.push((((1 + n_docs) as f64) / ((1 + count) as f64)).ln() + 1.0);
        vocabulary.insert(token, i);
    }
    Ok(TfidfModel {
        vocabulary,
        idf,
        n_docs,
    })
}

impl TfidfModel {
    pub fn vocabulary_len(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn idf(&self, token: &str) -> Option<f64> {
        self.vocabulary.get(token).map(|&i| self.idf[i])
    }

    /// Raw-count tf times idf, L2-normalized. Tokens outside the fitted
    /// vocabulary are dropped.
    pub fn transform(&self, text: &str) -> SparseVector {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for token in tokenize(text) {
            if let Some(&idx) = self.vocabulary.get(&token) {
                *counts.entry(idx).or_insert(0.0) += 1.0;
            }
        }
        let mut pairs: Vec<(usize, f64)> = counts
            .into_iter()
            .map(|(idx, tf)| (idx, tf * self.idf[idx]))
            .collect();
        let norm = pairs.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut pairs {
                *w /= norm;
            }
        }
        SparseVector { pairs }
    }
}

/// Cosine similarity of two vectors from the same model. Zero vectors score
/// 0; otherwise the result lies in [0, 1] because all weights are
/// non-negative.
pub fn cosine(a: &SparseVector, b: &SparseVector) -> f64 {
    if a.is_zero() || b.is_zero() {
        return 0.0;
    }
    let mut dot = 0.0;
    let mut i = 0;
    let mut j = 0;
    let (pa, pb) = (a.pairs(), b.pairs());
    while i < pa.len() && j < pb.len() {
        match pa[i].0.cmp(&pb[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += pa[i].1 * pb[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    // Vectors are unit-normalized at transform time; clamp rounding spill.
    dot.min(1.0)
}

/// Rank a frame's entries against the query and keep the top `m`.
///
/// The model is fitted on the query plus the frame's entry questions.
/// Ranking is by cosine descending with ties keeping stored entry order;
/// when `exclude_exact` is set, entries whose normalized question equals
/// the normalized query are dropped before ranking (leakage exclusion).
pub fn select_indirect_memory(
    query_question: &str,
    frame_entries: &[IndirectMemoryEntry],
    m: usize,
    exclude_exact: bool,
) -> Vec<IndirectMemoryEntry> {
    if m == 0 || frame_entries.is_empty() {
        return Vec::new();
    }
    let query_norm = normalize_question(query_question);
    let candidates: Vec<&IndirectMemoryEntry> = frame_entries
        .iter()
        .filter(|e| !(exclude_exact && normalize_question(&e.question) == query_norm))
        .collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    let mut corpus: Vec<&str> = vec![query_question];
    corpus.extend(candidates.iter().map(|e| e.question.as_str()));
    let model = match fit_tfidf(&corpus) {
        Ok(model) => model,
        Err(_) => return Vec::new(),
    };
    let query_vec = model.transform(query_question);
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, e)| (cosine(&query_vec, &model.transform(&e.question)), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored
        .into_iter()
        .take(m)
        .map(|(_, i)| candidates[i].clone())
        .collect()
}
