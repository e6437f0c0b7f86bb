use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loss::{mnr_loss, TemperatureParam};
use super::optim::{clip_grad_norm, AdamW};
use crate::encoder::Encoder;
use crate::moe::{mutual_information_loss, router_ce_loss, RoutingRecord, RoutingStrategy};
use crate::pipeline::{Corpus, PairEntry};
use crate::{ops, Error, Result};

/// Aligned positive pairs: `left[i]` and `right[i]` are co-cited.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub left: Vec<String>,
    pub right: Vec<String>,
    pub domains: Vec<Option<String>>,
    pub weights: Vec<u32>,
}

impl TrainBatch {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a PairEntry>, corpus: &Corpus) -> Result<Self> {
        let mut batch = TrainBatch {
            left: Vec::new(),
            right: Vec::new(),
            domains: Vec::new(),
            weights: Vec::new(),
        };
        for p in pairs {
            batch.left.push(corpus.require(&p.id_a)?.abstract_text.clone());
            batch.right.push(corpus.require(&p.id_b)?.abstract_text.clone());
            batch.domains.push(Some(p.domain.clone()));
            batch.weights.push(p.weight);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

/// Scalar results of one optimizer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub mnr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub router_ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mutual_info: Option<f64>,
    pub grad_norm: f64,
    pub temperature: f64,
    pub swapped: bool,
}

/// Owns a model, its temperature and optimizer state.
#[derive(Debug)]
pub struct Trainer {
    model: Encoder,
    temperature: TemperatureParam,
    optimizer: AdamW,
    config: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
}

fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(name.contains("norm") || leaf == "bias" || leaf.starts_with('b'))
}

impl Trainer {
    pub fn new(model: Encoder, config: TrainConfig) -> Result<Self> {
        let temperature = TemperatureParam::new(config.initial_temperature, model.dtype())?;
        Self::resume(model, temperature, 0, config)
    }

    /// Continues from a saved model, temperature and step counter. Optimizer
    /// moments start fresh.
    pub fn resume(model: Encoder, temperature: TemperatureParam, step: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params: Vec<(Var, bool)> = model
            .named_params()
            .into_iter()
            .map(|(name, var)| (var, decays(&name)))
            .collect();
        params.push((temperature.var().clone(), false));
        let optimizer = AdamW::new(params, &config);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            temperature,
            optimizer,
            config,
            rng,
            step,
        })
    }

    pub fn model(&self) -> &Encoder {
        &self.model
    }

    pub fn temperature(&self) -> &TemperatureParam {
        &self.temperature
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub(crate) fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn into_parts(self) -> (Encoder, TemperatureParam, usize) {
        (self.model, self.temperature, self.step)
    }

    /// Detached copies of every trainable tensor, in optimizer order.
    pub(crate) fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.optimizer
            .params()
            .iter()
            .map(|v| Ok(v.as_tensor().detach().copy()?))
            .collect()
    }

    pub(crate) fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        for (var, t) in self.optimizer.params().iter().zip(snapshot) {
            var.set(t)?;
        }
        Ok(())
    }

    /// One update on `batch` at learning rate `lr`.
    ///
    /// Left and right roles are swapped with probability 0.5, both sides are
    /// embedded, and the contrastive loss is combined with the router loss
    /// the routing strategy calls for.
    pub fn train_step(&mut self, batch: &TrainBatch, lr: f64) -> Result<StepLosses> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::Data("a training batch needs at least two pairs".into()));
        }
        if batch.right.len() != b || batch.domains.len() != b {
            return Err(Error::Data("batch columns differ in length".into()));
        }
        let swapped = self.rng.random_bool(0.5);
        let (first, second) = if swapped {
            (&batch.right, &batch.left)
        } else {
            (&batch.left, &batch.right)
        };
        let texts: Vec<&str> = first.iter().chain(second).map(String::as_str).collect();
        let domains: Vec<Option<&str>> = batch.domains.iter().chain(&batch.domains).map(|d| d.as_deref()).collect();
        let input = self.model.prepare(&texts, &domains)?;
        let (pooled, routing) = self.model.embed(&input)?;
        let mnr = mnr_loss(&pooled.narrow(0, 0, b)?, &pooled.narrow(0, b, b)?, &self.temperature)?;

        let mut total = mnr.clone();
        let mut router_ce = None;
        let mut mutual_info = None;
        if let Some(moe) = self.model.moe() {
            let owners: Vec<&str> = domains.iter().map(|d| d.unwrap_or("")).collect();
            match moe.strategy {
                RoutingStrategy::Enforced => {}
                RoutingStrategy::RouterCe => {
                    let (logits, targets) = router_targets(&routing, &owners, |d| moe.expert_for(d))?;
                    let loss = router_ce_loss(&logits, &targets)?;
                    router_ce = Some(ops::scalar_f64(&loss)?);
                    total = (total + (loss * self.config.router_ce_weight)?)?;
                }
                RoutingStrategy::MutualInfo => {
                    if domains.iter().any(Option::is_none) {
                        return Err(Error::Data("mutual-information routing needs a domain per pair".into()));
                    }
                    let ids: BTreeMap<&str, usize> = owners
                        .iter()
                        .copied()
                        .collect::<std::collections::BTreeSet<_>>()
                        .into_iter()
                        .enumerate()
                        .map(|(i, d)| (d, i))
                        .collect();
                    let labels: Vec<usize> = owners.iter().map(|d| ids[d]).collect();
                    let probs = routing
                        .iter()
                        .map(|r| r.example_probs()?.ok_or_else(|| Error::Data("router produced no logits".into())))
                        .collect::<Result<Vec<_>>>()?;
                    let loss = mutual_information_loss(&probs, &labels, moe.mi_loss_weight)?;
                    mutual_info = Some(ops::scalar_f64(&loss)?);
                    total = (total + (loss * self.config.mi_weight)?)?;
                }
            }
        }

        let mut grads = total.backward()?;
        let grad_norm = clip_grad_norm(self.optimizer.params(), &mut grads, self.config.grad_clip)?;
        self.optimizer.step(&grads, lr)?;
        self.step += 1;
        Ok(StepLosses {
            total: ops::scalar_f64(&total)?,
            mnr: ops::scalar_f64(&mnr)?,
            router_ce,
            mutual_info,
            grad_norm,
            temperature: self.temperature.value()?,
            swapped,
        })
    }
}

type Targets = (Vec<Tensor>, Vec<Vec<u32>>);

fn router_targets(
    routing: &[RoutingRecord],
    owners: &[&str],
    expert_for: impl Fn(&str) -> Result<usize>,
) -> Result<Targets> {
    let mut logits = Vec::with_capacity(routing.len());
    let mut targets = Vec::with_capacity(routing.len());
    for record in routing {
        let l = record
            .valid_logits()?
            .ok_or_else(|| Error::Data("router produced no logits".into()))?;
        let t = record
            .valid_unit_sequences()
            .into_iter()
            .map(|s| expert_for(owners[s]).map(|e| e as u32))
            .collect::<Result<Vec<_>>>()?;
        logits.push(l);
        targets.push(t);
    }
    Ok((logits, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_excludes_biases_and_norms() {
        assert!(decays("block.0.attention.query.weight"));
        assert!(decays("block.1.expert.0.w3"));
        assert!(decays("embeddings.token"));
        assert!(!decays("block.0.attention.query.bias"));
        assert!(!decays("block.0.mlp.b1"));
        assert!(!decays("block.0.expert.1.b3"));
        assert!(!decays("embeddings.norm.weight"));
        assert!(!decays("block.0.output_norm.weight"));
    }
}
