use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;

use super::record::CitationGraph;
use crate::{Error, Result};

/// Unordered pair of graph indices, stored with `0 < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairKey(pub u32, pub u32);

impl PairKey {
    pub fn new(a: usize, b: usize) -> Self {
        debug_assert_ne!(a, b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        PairKey(lo as u32, hi as u32)
    }
}

/// Co-citation multiset: unordered pair → number of citing papers that list
/// both members.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoCitations {
    pairs: BTreeMap<PairKey, u32>,
}

impl CoCitations {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn multiplicity(&self, key: PairKey) -> u32 {
        self.pairs.get(&key).copied().unwrap_or(0)
    }

    /// Pairs in key order.
    pub fn iter(&self) -> impl Iterator<Item = (PairKey, u32)> + '_ {
        self.pairs.iter().map(|(k, &m)| (*k, m))
    }

    /// Total multiplicity summed over pairs.
    pub fn total(&self) -> u64 {
        self.pairs.values().map(|&m| m as u64).sum()
    }

    pub fn histogram(&self) -> BTreeMap<u32, usize> {
        let mut h = BTreeMap::new();
        for &m in self.pairs.values() {
            *h.entry(m).or_insert(0) += 1;
        }
        h
    }
}

/// Every citing paper adds one to each unordered pair of its known, distinct
/// references.
pub fn extract_cocitations(graph: &CitationGraph) -> CoCitations {
    let mut pairs = BTreeMap::new();
    let mut refs: Vec<usize> = Vec::new();
    for record in graph.records() {
        refs.clear();
        refs.extend(record.references.iter().filter_map(|id| graph.index_of(id)));
        refs.sort_unstable();
        refs.dedup();
        for (i, &a) in refs.iter().enumerate() {
            for &b in &refs[i + 1..] {
                *pairs.entry(PairKey::new(a, b)).or_insert(0) += 1;
            }
        }
    }
    CoCitations { pairs }
}

/// Draws `count` distinct unordered pairs, uniformly, among papers cited at
/// least `min_citations` times that were never co-cited.
pub fn sample_negatives<R: Rng + ?Sized>(
    graph: &CitationGraph,
    cocitations: &CoCitations,
    count: usize,
    min_citations: u64,
    rng: &mut R,
) -> Result<Vec<PairKey>> {
    sample_negatives_excluding(graph, cocitations, count, min_citations, &HashSet::new(), rng)
}

/// Like [`sample_negatives`], also skipping the pairs in `taken`. Those must be
/// eligible, never co-cited pairs, such as an earlier draw.
pub(crate) fn sample_negatives_excluding<R: Rng + ?Sized>(
    graph: &CitationGraph,
    cocitations: &CoCitations,
    count: usize,
    min_citations: u64,
    taken: &HashSet<PairKey>,
    rng: &mut R,
) -> Result<Vec<PairKey>> {
    let eligible: Vec<usize> = (0..graph.len())
        .filter(|&i| graph.record(i).citation_count >= min_citations)
        .collect();
    let m = eligible.len() as u64;
    let all_pairs = m * m.saturating_sub(1) / 2;
    let is_eligible = |i: usize| graph.record(i).citation_count >= min_citations;
    let blocked = cocitations
        .iter()
        .filter(|(k, _)| is_eligible(k.0 as usize) && is_eligible(k.1 as usize))
        .count() as u64;
    let available = (all_pairs - blocked) as usize - taken.len();
    if count > available {
        return Err(Error::InsufficientNegatives {
            requested: count,
            available,
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let usable = |k: &PairKey| cocitations.multiplicity(*k) == 0 && !taken.contains(k);

    if count.saturating_mul(2) <= available {
        let mut chosen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let a = eligible[rng.random_range(0..eligible.len())];
            let b = eligible[rng.random_range(0..eligible.len())];
            if a == b {
                continue;
            }
            let key = PairKey::new(a, b);
            if usable(&key) && chosen.insert(key) {
                out.push(key);
            }
        }
        Ok(out)
    } else {
        let mut pool = Vec::with_capacity(available);
        for (i, &a) in eligible.iter().enumerate() {
            for &b in &eligible[i + 1..] {
                let key = PairKey::new(a, b);
                if usable(&key) {
                    pool.push(key);
                }
            }
        }
        let (picked, _) = pool.partial_shuffle(rng, count);
        Ok(picked.to_vec())
    }
}
