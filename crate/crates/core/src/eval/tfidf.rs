use std::collections::HashMap;

use super::metrics::{cosine_similarity, ScoredPair};
use crate::encoder::words;
use crate::pipeline::{Corpus, PairEntry};
use crate::{Error, Result};

/// TF-IDF weights fitted on a corpus: raw term counts times
/// `ln((1 + N) / (1 + df)) + 1`.
#[derive(Debug, Clone)]
pub struct TfIdf {
    terms: HashMap<String, usize>,
    idf: Vec<f64>,
}

impl TfIdf {
    pub fn fit<'a>(documents: impl IntoIterator<Item = &'a str>) -> Self {
        let mut terms: HashMap<String, usize> = HashMap::new();
        let mut df: Vec<usize> = Vec::new();
        let mut n = 0usize;
        for doc in documents {
            n += 1;
            let mut seen: Vec<usize> = words(doc)
                .map(|w| {
                    let next = terms.len();
                    *terms.entry(w).or_insert(next)
                })
                .collect();
            seen.sort_unstable();
            seen.dedup();
            df.resize(terms.len(), 0);
            for t in seen {
                df[t] += 1;
            }
        }
        let idf = df
            .iter()
            .map(|&d| ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        Self { terms, idf }
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Dense TF-IDF vector of `text`; `name` identifies the document in the
    /// error raised when no token of it is known.
    pub fn vector(&self, name: &str, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.terms.len()];
        let mut any = false;
        for w in words(text) {
            if let Some(&t) = self.terms.get(&w) {
                v[t] += self.idf[t];
                any = true;
            }
        }
        if !any {
            return Err(Error::Data(format!("document `{name}` has no in-vocabulary tokens")));
        }
        Ok(v)
    }
}

/// Scores pairs by cosine similarity of TF-IDF vectors fitted on the whole
/// corpus.
pub fn tfidf_baseline(corpus: &Corpus, pairs: &[PairEntry]) -> Result<Vec<ScoredPair>> {
    let model = TfIdf::fit(corpus.entries().iter().map(|e| e.abstract_text.as_str()));
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        for id in [&p.id_a, &p.id_b] {
            if !cache.contains_key(id.as_str()) {
                let entry = corpus.require(id)?;
                cache.insert(id.as_str(), model.vector(id, &entry.abstract_text)?);
            }
        }
        out.push(ScoredPair {
            id_a: p.id_a.clone(),
            id_b: p.id_b.clone(),
            similarity: cosine_similarity(&cache[p.id_a.as_str()], &cache[p.id_b.as_str()])?,
            label: p.label,
            domain: p.domain.clone(),
        });
    }
    Ok(out)
}
