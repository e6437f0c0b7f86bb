use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cocite::{extract_cocitations, sample_negatives, sample_negatives_excluding, CoCitations, PairKey};
use super::record::{read_jsonl, write_jsonl, CitationGraph, Corpus};
use crate::{Error, Result};

/// Where negative pairs may come from in a multi-domain build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeScope {
    #[default]
    SameDomain,
    AnyDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Pairs with a member published in this year or later go to TEST.
    pub recent_year: i32,
    pub valid_fraction: f64,
    pub min_citations: u64,
    pub negative_scope: NegativeScope,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            recent_year: 2022,
            valid_fraction: 0.01,
            min_citations: 15,
            negative_scope: NegativeScope::SameDomain,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(Error::Config("valid_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "pairs.train",
            Split::Valid => "pairs.valid",
            Split::Test => "pairs.test",
        }
    }
}

/// One line of a split file. `label` is 1 for co-cited pairs and 0 for
/// sampled negatives; `weight` is the co-citation multiplicity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id_a: String,
    pub id_b: String,
    pub label: u8,
    pub weight: u32,
    pub domain: String,
}

impl PairEntry {
    /// Order-insensitive identity of the pair.
    pub fn key(&self) -> (&str, &str) {
        if self.id_a <= self.id_b {
            (&self.id_a, &self.id_b)
        } else {
            (&self.id_b, &self.id_a)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairDataset {
    /// Positives, each repeated `weight` times.
    pub train: Vec<PairEntry>,
    /// Positives followed by an equal number of negatives.
    pub valid: Vec<PairEntry>,
    pub test: Vec<PairEntry>,
}

impl PairDataset {
    pub fn split(&self, split: Split) -> &[PairEntry] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn extend(&mut self, other: PairDataset) {
        self.train.extend(other.train);
        self.valid.extend(other.valid);
        self.test.extend(other.test);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainStats {
    pub papers: usize,
    pub distinct_pairs: usize,
    pub test_pairs: usize,
    pub train_distinct: usize,
    pub train_materialized: usize,
    pub valid_positive: usize,
    pub valid_negative: usize,
    pub multiplicity_histogram: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub papers: usize,
    pub distinct_pairs: usize,
    pub multiplicity_histogram: BTreeMap<u32, usize>,
    pub domains: BTreeMap<String, DomainStats>,
}

fn entry(graph: &CitationGraph, key: PairKey, label: u8, weight: u32, domain: &str) -> PairEntry {
    PairEntry {
        id_a: graph.record(key.0 as usize).id.clone(),
        id_b: graph.record(key.1 as usize).id.clone(),
        label,
        weight,
        domain: domain.to_string(),
    }
}

/// Splits one domain's co-citations.
///
/// Pairs with a member from `recent_year` onwards form TEST. The rest are
/// shuffled; `max(1, round(valid_fraction · N))` go to VALID together with as
/// many sampled negatives, and the remainder is materialized into TRAIN with
/// one copy per co-citation.
pub fn build_splits<R: Rng + ?Sized>(
    cocitations: &CoCitations,
    graph: &CitationGraph,
    domain: &str,
    cfg: &SplitConfig,
    rng: &mut R,
) -> Result<(PairDataset, DomainStats)> {
    build_splits_with(cocitations, graph, domain, cfg, None, rng)
}

fn build_splits_with<R: Rng + ?Sized>(
    cocitations: &CoCitations,
    graph: &CitationGraph,
    domain: &str,
    cfg: &SplitConfig,
    negative_source: Option<(&CitationGraph, &CoCitations, &mut HashSet<PairKey>)>,
    rng: &mut R,
) -> Result<(PairDataset, DomainStats)> {
    cfg.validate()?;
    if cocitations.is_empty() {
        return Err(Error::Data(format!("domain `{domain}` has no co-citation pairs")));
    }
    let is_recent = |i: u32| graph.record(i as usize).year >= cfg.recent_year;
    let (test, mut rest): (Vec<_>, Vec<_>) = cocitations
        .iter()
        .partition(|(k, _)| is_recent(k.0) || is_recent(k.1));
    rest.shuffle(rng);
    let n = rest.len();
    let n_valid = ((cfg.valid_fraction * n as f64).round() as usize).max(1);
    if n <= n_valid {
        return Err(Error::Data(format!(
            "domain `{domain}`: no pairs left for TRAIN ({n} non-test pairs)"
        )));
    }
    let (valid_pos, train_pos) = rest.split_at(n_valid);

    let mut out = PairDataset::default();
    out.test = test.iter().map(|&(k, m)| entry(graph, k, 1, m, domain)).collect();
    out.valid = valid_pos.iter().map(|&(k, m)| entry(graph, k, 1, m, domain)).collect();
    match negative_source {
        None => {
            let neg = sample_negatives(graph, cocitations, n_valid, cfg.min_citations, rng)?;
            out.valid.extend(neg.into_iter().map(|k| entry(graph, k, 0, 1, domain)));
        }
        Some((full, full_co, taken)) => {
            let neg = sample_negatives_excluding(full, full_co, n_valid, cfg.min_citations, taken, rng)?;
            taken.extend(neg.iter().copied());
            out.valid.extend(neg.into_iter().map(|k| entry(full, k, 0, 1, domain)));
        }
    }
    for &(k, m) in train_pos {
        let e = entry(graph, k, 1, m, domain);
        for _ in 1..m {
            out.train.push(e.clone());
        }
        out.train.push(e);
    }

    let stats = DomainStats {
        papers: graph.len(),
        distinct_pairs: cocitations.len(),
        test_pairs: out.test.len(),
        train_distinct: train_pos.len(),
        train_materialized: out.train.len(),
        valid_positive: n_valid,
        valid_negative: out.valid.len() - n_valid,
        multiplicity_histogram: cocitations.histogram(),
    };
    Ok((out, stats))
}

/// Runs the split per domain and concatenates the results, each pair tagged
/// with its domain.
pub fn build_dataset<R: Rng + ?Sized>(
    graph: &CitationGraph,
    cfg: &SplitConfig,
    rng: &mut R,
) -> Result<(PairDataset, DatasetStats)> {
    cfg.validate()?;
    let mut dataset = PairDataset::default();
    let mut stats = DatasetStats {
        papers: graph.len(),
        ..DatasetStats::default()
    };
    let full_co = match cfg.negative_scope {
        NegativeScope::AnyDomain => Some(extract_cocitations(graph)),
        NegativeScope::SameDomain => None,
    };
    // Cross-domain negatives are drawn from one pool, so a pair picked for
    // one domain is off limits for the next.
    let mut taken = HashSet::new();
    for domain in graph.domains() {
        let sub = graph.restrict_to_domain(&domain);
        let co = extract_cocitations(&sub);
        if co.is_empty() {
            continue;
        }
        let source = full_co.as_ref().map(|c| (graph, c, &mut taken));
        let (part, domain_stats) = build_splits_with(&co, &sub, &domain, cfg, source, rng)?;
        stats.distinct_pairs += domain_stats.distinct_pairs;
        for (&m, &c) in &domain_stats.multiplicity_histogram {
            *stats.multiplicity_histogram.entry(m).or_insert(0) += c;
        }
        stats.domains.insert(domain, domain_stats);
        dataset.extend(part);
    }
    if stats.domains.is_empty() {
        return Err(Error::Data("no co-citation pairs in any domain".into()));
    }
    Ok((dataset, stats))
}

pub const STATS_FILE: &str = "stats.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";

/// Writes the three split files, `stats.json` and `corpus.jsonl`.
pub fn write_dataset(dir: &Path, dataset: &PairDataset, stats: &DatasetStats, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in [Split::Train, Split::Valid, Split::Test] {
        write_pairs(&dir.join(split.file_name()), dataset.split(split))?;
    }
    let stats_path = dir.join(STATS_FILE);
    let mut text = serde_json::to_string_pretty(stats)?;
    text.push('\n');
    fs::write(&stats_path, text).map_err(|e| Error::io(&stats_path, e))?;
    corpus.save(&dir.join(CORPUS_FILE))
}

pub fn write_pairs(path: &Path, pairs: &[PairEntry]) -> Result<()> {
    write_jsonl(path, pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairEntry>> {
    let pairs: Vec<PairEntry> = read_jsonl(path)?;
    if let Some(bad) = pairs.iter().find(|p| p.label > 1) {
        return Err(Error::Data(format!("label {} is not 0 or 1", bad.label)));
    }
    Ok(pairs)
}
