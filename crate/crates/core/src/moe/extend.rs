use candle_core::Var;
use serde::Serialize;

use super::config::{MoeConfig, RoutingStrategy};
use super::layer::{ExpertMlp, MoeLayer, Router};
use crate::encoder::{fresh_var, Encoder, FeedForward, ModelConfig, ParamSource, RandomInit};
use crate::{Error, Result};

/// Turns a dense encoder into a mixture-of-experts encoder.
///
/// Every block listed in `cfg.extended_layers` gets `E` copies of its MLP as
/// experts. Each expert gains a gate branch with `W3 = 0` and `b3 = 1`, so it
/// computes exactly the original MLP until training moves it, and the block
/// gets a router drawn from normal(0, 0.02). All other weights are copied
/// unchanged into fresh storage; the base model is not aliased.
pub fn extend_model(base: &Encoder, cfg: &MoeConfig, seed: u64) -> Result<Encoder> {
    if base.moe().is_some() {
        return Err(Error::Config("model already has expert blocks".into()));
    }
    let model_cfg = base.config();
    cfg.validate(model_cfg.num_blocks)?;
    if cfg.strategy == RoutingStrategy::Enforced {
        cfg.check_domains(base.vocab().domains())?;
    }

    let mut copy = |v: &Var| fresh_var(v);
    let mut weights = base.weights().map_vars(&mut copy)?;
    let mut init = RandomInit::new(seed, base.init_scheme().weight_std, base.dtype());
    let (d, inner) = (model_cfg.hidden_dim, model_cfg.intermediate_dim);

    for &i in &cfg.extended_layers {
        let block = &mut weights.blocks[i];
        let FeedForward::Dense(mlp) = &block.feed_forward else {
            unreachable!("dense base checked above");
        };
        let experts = (0..cfg.num_experts)
            .map(|e| {
                let prefix = format!("block.{i}.expert.{e}");
                Ok(ExpertMlp {
                    w1: fresh_var(&mlp.w1)?,
                    b1: fresh_var(&mlp.b1)?,
                    w2: fresh_var(&mlp.w2)?,
                    b2: fresh_var(&mlp.b2)?,
                    w3: init.zeros(&format!("{prefix}.w3"), &[d, inner])?,
                    b3: init.ones(&format!("{prefix}.b3"), &[inner])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let router = Router {
            weight: init.normal(&format!("block.{i}.router.weight"), &[d, cfg.num_experts])?,
            bias: init.zeros(&format!("block.{i}.router.bias"), &[cfg.num_experts])?,
        };
        block.feed_forward = FeedForward::Experts(MoeLayer { experts, router });
    }

    Encoder::from_parts(
        model_cfg.clone(),
        base.vocab().clone(),
        weights,
        Some(cfg.clone()),
        base.init_scheme().clone(),
        base.use_domain_tokens(),
    )
}

/// Stored versus per-input parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    /// Every parameter held by the model.
    pub stored: usize,
    /// Parameters touched when embedding one input.
    pub active: usize,
    /// Stored `W3`/`b3` gate-branch parameters across all experts.
    pub gate_branch: usize,
    /// Stored router parameters.
    pub routers: usize,
}

/// Parameter counts derived from shapes alone, without allocating weights.
pub fn parameter_count(config: &ModelConfig, moe: Option<&MoeConfig>) -> ParameterCount {
    let d = config.hidden_dim;
    let inner = config.intermediate_dim;
    let norm = 2 * d;
    let embeddings = config.vocab_size * d + config.max_seq_len * d + norm;
    let attention = 4 * (d * d + d);
    let mlp = d * inner + inner + inner * d + d;
    let gate = d * inner + inner;
    let pooler = d * d + d;

    let mut count = ParameterCount {
        stored: embeddings + pooler,
        active: embeddings + pooler,
        gate_branch: 0,
        routers: 0,
    };
    for i in 0..config.num_blocks {
        let shared = attention + 2 * norm;
        count.stored += shared;
        count.active += shared;
        match moe {
            Some(cfg) if cfg.extended_layers.contains(&i) => {
                let e = cfg.num_experts;
                let router = d * e + e;
                let used = match cfg.strategy {
                    RoutingStrategy::Enforced => 1,
                    _ => cfg.top_k,
                };
                count.stored += e * (mlp + gate) + router;
                count.active += used * (mlp + gate);
                if cfg.strategy != RoutingStrategy::Enforced {
                    count.active += router;
                }
                count.gate_branch += e * gate;
                count.routers += router;
            }
            _ => {
                count.stored += mlp;
                count.active += mlp;
            }
        }
    }
    count
}
