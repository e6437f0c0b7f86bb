use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{cosine_similarity, distance_and_accuracy, f1max_search, ScoredPair, ThresholdRange};
use crate::encoder::Encoder;
use crate::pipeline::{Corpus, PairEntry};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Full threshold range, F1max reported.
    Validation,
    /// Thresholds restricted to `[0.5, 1]`; F1max withheld.
    Test,
}

impl EvalMode {
    pub fn range(self) -> ThresholdRange {
        match self {
            EvalMode::Validation => ThresholdRange::FULL,
            EvalMode::Test => ThresholdRange::RESTRICTED,
        }
    }

    fn label(self) -> &'static str {
        match self {
            EvalMode::Validation => "valid",
            EvalMode::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub pairs: usize,
    pub positives: usize,
    pub negatives: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1max: Option<f64>,
    pub cutoff: f64,
    pub mean_distance: f64,
    pub accuracy: f64,
    /// No positives were present, so F1 is undefined.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub range: ThresholdRange,
    pub overall: SplitMetrics,
    pub per_domain: BTreeMap<String, SplitMetrics>,
}

impl EvalReport {
    /// Mean of the per-domain F1max values; `None` in test mode.
    pub fn mean_domain_f1max(&self) -> Option<f64> {
        if self.per_domain.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for m in self.per_domain.values() {
            sum += m.f1max?;
        }
        Some(sum / self.per_domain.len() as f64)
    }

    /// Markdown table with one row per domain plus an overall row, columns
    /// in Cutoff, F1Max, Dist, Acc order.
    pub fn table(&self, model: &str) -> String {
        let mut out = String::from("| Model | Domain | Split | Cutoff | F1Max | Dist | Acc |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        let rows = self
            .per_domain
            .iter()
            .map(|(d, m)| (d.as_str(), m))
            .chain(std::iter::once(("all", &self.overall)));
        for (domain, m) in rows {
            let f1 = m.f1max.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                out,
                "| {model} | {domain} | {} | {:.2} | {f1} | {:.2} | {:.2} |",
                self.mode.label(),
                m.cutoff,
                m.mean_distance,
                m.accuracy
            );
        }
        out
    }
}

fn split_metrics(scored: &[ScoredPair], mode: EvalMode) -> Result<SplitMetrics> {
    let search = f1max_search(scored, mode.range())?;
    let (mean_distance, accuracy) = distance_and_accuracy(scored, search.cutoff);
    let positives = scored.iter().filter(|p| p.label == 1).count();
    Ok(SplitMetrics {
        pairs: scored.len(),
        positives,
        negatives: scored.len() - positives,
        f1max: match mode {
            EvalMode::Validation => Some(search.f1max),
            EvalMode::Test => None,
        },
        cutoff: search.cutoff,
        mean_distance,
        accuracy,
        undefined: search.undefined,
    })
}

/// Builds a report from already-scored pairs. Each domain gets its own
/// threshold search.
pub fn evaluate_scored(scored: &[ScoredPair], mode: EvalMode) -> Result<EvalReport> {
    if scored.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut by_domain: BTreeMap<&str, Vec<ScoredPair>> = BTreeMap::new();
    for p in scored {
        by_domain.entry(p.domain.as_str()).or_default().push(p.clone());
    }
    let per_domain = by_domain
        .into_iter()
        .map(|(d, pairs)| Ok((d.to_string(), split_metrics(&pairs, mode)?)))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        mode,
        range: mode.range(),
        overall: split_metrics(scored, mode)?,
        per_domain,
    })
}

/// Embeds every distinct abstract once, with its own domain, and scores each
/// pair by cosine similarity.
pub fn score_pairs(model: &Encoder, corpus: &Corpus, pairs: &[PairEntry], chunk: usize) -> Result<Vec<ScoredPair>> {
    let mut order: Vec<&str> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for p in pairs {
        for id in [p.id_a.as_str(), p.id_b.as_str()] {
            if !slot.contains_key(id) {
                corpus.require(id)?;
                slot.insert(id, order.len());
                order.push(id);
            }
        }
    }
    let texts: Vec<&str> = order.iter().map(|id| corpus.get(id).unwrap().abstract_text.as_str()).collect();
    let domains: Vec<Option<&str>> = order.iter().map(|id| Some(corpus.get(id).unwrap().domain.as_str())).collect();
    let vectors = model.embed_texts(&texts, &domains, chunk)?;
    pairs
        .iter()
        .map(|p| {
            let u = &vectors[slot[p.id_a.as_str()]];
            let v = &vectors[slot[p.id_b.as_str()]];
            Ok(ScoredPair {
                id_a: p.id_a.clone(),
                id_b: p.id_b.clone(),
                similarity: cosine_similarity(u, v)?,
                label: p.label,
                domain: p.domain.clone(),
            })
        })
        .collect()
}

pub fn evaluate_model(model: &Encoder, corpus: &Corpus, pairs: &[PairEntry], mode: EvalMode) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let scored = score_pairs(model, corpus, pairs, 64)?;
    evaluate_scored(&scored, mode)
}
