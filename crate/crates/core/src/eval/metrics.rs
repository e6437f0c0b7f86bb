use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A pair with its cosine similarity and gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub id_a: String,
    pub id_b: String,
    pub similarity: f64,
    pub label: u8,
    pub domain: String,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Data(format!("vector lengths differ: {} vs {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Data("cosine similarity of a zero vector is undefined".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Closed interval of candidate thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRange {
    pub lo: f64,
    pub hi: f64,
}

impl ThresholdRange {
    pub const FULL: Self = Self { lo: -1.0, hi: 1.0 };
    /// Excludes the trivial all-positive threshold on positive-only splits.
    pub const RESTRICTED: Self = Self { lo: 0.5, hi: 1.0 };

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Search {
    pub f1max: f64,
    pub cutoff: f64,
    /// Set when the pairs contain no positives, so F1 is undefined; `f1max`
    /// is then reported as 0.
    pub undefined: bool,
}

/// F1 of the positive class when `predicted` pairs are called positive, `tp`
/// of them correctly, out of `positives` true positives.
pub(crate) fn f1(tp: usize, predicted: usize, positives: usize) -> f64 {
    let denom = predicted + positives;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Best F1 over thresholds in `range`.
///
/// Candidates are both range endpoints and every distinct similarity inside
/// the range; a pair is predicted positive when `similarity ≥ threshold`. The
/// smallest threshold reaching the maximum is returned.
pub fn f1max_search(scored: &[ScoredPair], range: ThresholdRange) -> Result<F1Search> {
    if scored.is_empty() {
        return Err(Error::Data("no scored pairs".into()));
    }
    if !(range.lo <= range.hi) {
        return Err(Error::Config(format!("empty threshold range [{}, {}]", range.lo, range.hi)));
    }
    if let Some(p) = scored.iter().find(|p| !p.similarity.is_finite()) {
        return Err(Error::Data(format!("non-finite similarity for ({}, {})", p.id_a, p.id_b)));
    }
    let positives = scored.iter().filter(|p| p.label == 1).count();
    if positives == 0 {
        return Ok(F1Search {
            f1max: 0.0,
            cutoff: range.lo,
            undefined: true,
        });
    }
    let mut order: Vec<(f64, u8)> = scored.iter().map(|p| (p.similarity, p.label)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));

    // Walk thresholds from high to low; `next` is the first pair not yet
    // predicted positive.
    let mut next = 0;
    let (mut tp, mut predicted) = (0usize, 0usize);
    let admit = |threshold: f64, next: &mut usize, tp: &mut usize, predicted: &mut usize| {
        while *next < order.len() && order[*next].0 >= threshold {
            *predicted += 1;
            *tp += order[*next].1 as usize;
            *next += 1;
        }
    };

    admit(range.hi, &mut next, &mut tp, &mut predicted);
    let mut best = F1Search {
        f1max: f1(tp, predicted, positives),
        cutoff: range.hi,
        undefined: false,
    };
    let consider = |threshold: f64, tp: usize, predicted: usize, best: &mut F1Search| {
        let score = f1(tp, predicted, positives);
        if score >= best.f1max {
            *best = F1Search {
                f1max: score,
                cutoff: threshold,
                undefined: false,
            };
        }
    };
    while next < order.len() && order[next].0 >= range.lo {
        let threshold = order[next].0;
        admit(threshold, &mut next, &mut tp, &mut predicted);
        consider(threshold, tp, predicted, &mut best);
    }
    admit(range.lo, &mut next, &mut tp, &mut predicted);
    consider(range.lo, tp, predicted, &mut best);
    Ok(best)
}

/// Mean `|similarity − label|` and the fraction of pairs whose thresholded
/// prediction matches the label.
pub fn distance_and_accuracy(scored: &[ScoredPair], cutoff: f64) -> (f64, f64) {
    if scored.is_empty() {
        return (0.0, 0.0);
    }
    let n = scored.len() as f64;
    let distance = scored.iter().map(|p| (p.similarity - p.label as f64).abs()).sum::<f64>() / n;
    let correct = scored
        .iter()
        .filter(|p| (p.similarity >= cutoff) == (p.label == 1))
        .count();
    (distance, correct as f64 / n)
}
