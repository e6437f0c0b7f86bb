use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// What a routing decision applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One decision per sequence, from the mean of its unmasked token vectors.
    #[default]
    Sentence,
    /// One decision per token.
    Token,
}

/// How experts are chosen and what auxiliary loss trains the router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingStrategy {
    /// The domain's mapped expert is used directly; router logits are ignored.
    #[default]
    Enforced,
    /// Learned top-k routing plus cross-entropy of router logits against the
    /// domain's mapped expert.
    RouterCe,
    /// Learned top-k routing plus a mutual-information term between domains
    /// and experts.
    MutualInfo,
}

/// Which blocks receive experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelection {
    All,
    /// The single block at index `floor(T / 2)`.
    Middle,
}

impl LayerSelection {
    pub fn resolve(self, num_blocks: usize) -> Vec<usize> {
        match self {
            LayerSelection::All => (0..num_blocks).collect(),
            LayerSelection::Middle => vec![num_blocks / 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: usize,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub strategy: RoutingStrategy,
    pub extended_layers: Vec<usize>,
    #[serde(default = "default_mi_weight")]
    pub mi_loss_weight: f64,
    /// Domain name to expert index; required for enforced routing and the
    /// router cross-entropy loss.
    #[serde(default)]
    pub domain_experts: BTreeMap<String, usize>,
}

fn default_top_k() -> usize {
    1
}

fn default_mi_weight() -> f64 {
    1.0
}

impl MoeConfig {
    /// Enforced routing with domain `i` (in the given order) on expert `i`.
    pub fn enforced<S: AsRef<str>>(domains: &[S], layers: Vec<usize>) -> Self {
        Self {
            num_experts: domains.len().max(1),
            granularity: Granularity::Sentence,
            top_k: 1,
            strategy: RoutingStrategy::Enforced,
            extended_layers: layers,
            mi_loss_weight: 1.0,
            domain_experts: domains
                .iter()
                .enumerate()
                .map(|(i, d)| (d.as_ref().to_string(), i))
                .collect(),
        }
    }

    pub fn expert_for(&self, domain: &str) -> Result<usize> {
        self.domain_experts
            .get(domain)
            .copied()
            .ok_or_else(|| Error::UnknownDomain(domain.to_string()))
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k {} must lie in [1, {}]",
                self.top_k, self.num_experts
            )));
        }
        if self.extended_layers.is_empty() {
            return Err(Error::Config("extended_layers must not be empty".into()));
        }
        let mut seen = self.extended_layers.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.extended_layers.len() {
            return Err(Error::Config("extended_layers contains duplicates".into()));
        }
        if let Some(&bad) = self.extended_layers.iter().find(|&&i| i >= num_blocks) {
            return Err(Error::Config(format!(
                "extended layer {bad} is outside [0, {num_blocks})"
            )));
        }
        if !(self.mi_loss_weight >= 0.0 && self.mi_loss_weight.is_finite()) {
            return Err(Error::Config("mi_loss_weight must be a non-negative number".into()));
        }
        if let Some((d, &e)) = self.domain_experts.iter().find(|(_, &e)| e >= self.num_experts) {
            return Err(Error::Config(format!(
                "domain `{d}` is mapped to expert {e} but there are only {}",
                self.num_experts
            )));
        }
        if self.strategy == RoutingStrategy::Enforced && self.domain_experts.is_empty() {
            return Err(Error::Config("enforced routing needs a domain-to-expert map".into()));
        }
        Ok(())
    }

    /// Checks that every listed domain has an expert when routing depends on it.
    pub fn check_domains<'a>(&self, domains: impl IntoIterator<Item = &'a str>) -> Result<()> {
        if self.strategy == RoutingStrategy::MutualInfo {
            return Ok(());
        }
        for d in domains {
            self.expert_for(d)?;
        }
        Ok(())
    }
}
