//! Generated citation corpora with planted topic clusters.
//!
//! Every domain is split into clusters. A paper's abstract draws a few words
//! from its cluster's word pool and pads them with filler shared by all
//! papers; its references point at other papers of the same cluster. Pools
//! are large relative to the draw, so two papers of a cluster rarely share
//! many exact words, while a model that learns which words belong together
//! can still tell clusters apart.
//!
//! With `conflicting_facets`, every abstract carries two word groups: one
//! from its cluster's pool and one from a random pool of a second facet.
//! Domains alternate which facet defines their clusters, so the texts of all
//! domains look alike while what makes two of them similar depends on the
//! domain. With whole pools drawn and no filler, papers that picked the
//! same two pools have identical text whichever domain they belong to.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pipeline::PaperRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub domains: Vec<String>,
    pub papers_per_domain: usize,
    pub clusters_per_domain: usize,
    pub words_per_cluster: usize,
    pub topic_words_per_abstract: usize,
    pub filler_vocabulary: usize,
    pub filler_words_per_abstract: usize,
    pub references_per_paper: usize,
    /// Fraction of papers dated `recent_year`.
    pub recent_fraction: f64,
    pub first_year: i32,
    pub recent_year: i32,
    /// Citations from outside the corpus, drawn uniformly from `0..=max`.
    pub max_external_citations: u64,
    /// Give abstracts a second word group whose meaning flips between
    /// domains.
    pub conflicting_facets: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            domains: vec!["cvd".into(), "copd".into()],
            papers_per_domain: 1000,
            clusters_per_domain: 16,
            words_per_cluster: 40,
            topic_words_per_abstract: 8,
            filler_vocabulary: 300,
            filler_words_per_abstract: 12,
            references_per_paper: 4,
            recent_fraction: 0.03,
            first_year: 2012,
            recent_year: 2022,
            max_external_citations: 30,
            conflicting_facets: false,
            seed: 0,
        }
    }
}

const ONSETS: [&str; 16] = ["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Pronounceable pseudo-word for an index; distinct indices give distinct
/// words.
pub fn pseudo_word(mut index: usize) -> String {
    let mut out = String::new();
    loop {
        out.push_str(ONSETS[index % ONSETS.len()]);
        index /= ONSETS.len();
        out.push_str(VOWELS[index % VOWELS.len()]);
        index /= VOWELS.len();
        if index == 0 {
            break;
        }
        index -= 1;
    }
    out
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() || self.clusters_per_domain == 0 {
            return Err(Error::Config("need at least one domain and one cluster".into()));
        }
        if self.papers_per_domain / self.clusters_per_domain <= self.references_per_paper {
            return Err(Error::Config("clusters are too small for the requested references".into()));
        }
        if self.topic_words_per_abstract > self.words_per_cluster
            || self.filler_words_per_abstract > self.filler_vocabulary
        {
            return Err(Error::Config("cannot draw more words than a pool holds".into()));
        }
        Ok(())
    }
}

/// The generated records and the cluster of each, in the same order.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records: Vec<PaperRecord>,
    pub clusters: Vec<usize>,
    /// Pool of the second facet each abstract drew from, when facets are on.
    pub secondary: Vec<Option<usize>>,
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = cfg.clusters_per_domain * cfg.words_per_cluster;
    let filler: Vec<String> = (0..cfg.filler_vocabulary).map(pseudo_word).collect();
    let pools = |offset: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<String>> {
        let mut words: Vec<String> = (0..pool).map(|i| pseudo_word(cfg.filler_vocabulary + offset + i)).collect();
        words.shuffle(rng);
        words.chunks(cfg.words_per_cluster).map(<[String]>::to_vec).collect()
    };
    let facets = if cfg.conflicting_facets {
        vec![pools(0, &mut rng), pools(pool, &mut rng)]
    } else {
        Vec::new()
    };

    let mut records = Vec::new();
    let mut clusters = Vec::new();
    let mut secondary_pools = Vec::new();
    for (di, domain) in cfg.domains.iter().enumerate() {
        let (cluster_words, secondary) = if cfg.conflicting_facets {
            (facets[di % 2].clone(), Some(&facets[(di + 1) % 2]))
        } else {
            (pools(di * pool, &mut rng), None)
        };

        let start = records.len();
        let papers: Vec<usize> = (0..cfg.papers_per_domain).collect();
        for i in 0..cfg.papers_per_domain {
            let c = i % cfg.clusters_per_domain;
            let mut tokens: Vec<&str> = cluster_words[c]
                .choose_multiple(&mut rng, cfg.topic_words_per_abstract)
                .map(String::as_str)
                .collect();
            let mut drawn = None;
            if let Some(other) = secondary {
                let k = rng.random_range(0..other.len());
                drawn = Some(k);
                let pick = &other[k];
                tokens.extend(
                    pick.choose_multiple(&mut rng, cfg.topic_words_per_abstract)
                        .map(String::as_str),
                );
            }
            tokens.extend(
                filler
                    .choose_multiple(&mut rng, cfg.filler_words_per_abstract)
                    .map(String::as_str),
            );
            if cfg.conflicting_facets {
                // Word order carries no facet; sorting also keeps papers with
                // the same word sets identical.
                tokens.sort_unstable();
            } else {
                tokens.shuffle(&mut rng);
            }
            let year = if rng.random_bool(cfg.recent_fraction) {
                cfg.recent_year
            } else {
                rng.random_range(cfg.first_year..cfg.recent_year)
            };
            records.push(PaperRecord {
                id: format!("{domain}-{i:05}"),
                abstract_text: tokens.join(" ") + ".",
                domain: domain.clone(),
                year,
                references: Vec::new(),
                citation_count: 0,
            });
            clusters.push(di * cfg.clusters_per_domain + c);
            secondary_pools.push(drawn);
        }
        for i in 0..cfg.papers_per_domain {
            let c = i % cfg.clusters_per_domain;
            let mates: Vec<usize> = papers
                .iter()
                .copied()
                .filter(|&j| j != i && j % cfg.clusters_per_domain == c)
                .collect();
            let refs: Vec<usize> = mates
                .choose_multiple(&mut rng, cfg.references_per_paper)
                .copied()
                .collect();
            for &j in &refs {
                records[start + j].citation_count += 1;
            }
            records[start + i].references = refs.iter().map(|&j| format!("{domain}-{j:05}")).collect();
        }
    }
    for r in &mut records {
        r.citation_count += rng.random_range(0..=cfg.max_external_citations);
    }
    Ok(SyntheticCorpus {
        records,
        clusters,
        secondary: secondary_pools,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn pseudo_words_are_distinct() {
        let words: HashSet<String> = (0..5000).map(pseudo_word).collect();
        assert_eq!(words.len(), 5000);
    }

    #[test]
    fn references_stay_in_cluster() {
        let cfg = SyntheticConfig {
            papers_per_domain: 80,
            clusters_per_domain: 4,
            ..SyntheticConfig::default()
        };
        let corpus = generate(&cfg).unwrap();
        assert_eq!(corpus.records.len(), 160);
        let index: std::collections::HashMap<&str, usize> =
            corpus.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        for (i, r) in corpus.records.iter().enumerate() {
            assert_eq!(r.references.len(), 4);
            for id in &r.references {
                assert_eq!(corpus.clusters[index[id.as_str()]], corpus.clusters[i]);
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SyntheticConfig {
            papers_per_domain: 50,
            clusters_per_domain: 5,
            ..SyntheticConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap().records, generate(&cfg).unwrap().records);
    }
}
