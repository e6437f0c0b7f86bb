use candle_core::{Device, Tensor, Var};

use super::config::{Granularity, MoeConfig, RoutingStrategy};
use crate::encoder::{Activation, ParamSource};
use crate::{ops, Error, Result};

/// One expert: the gated MLP `(σ(X·W1 + b1) ⊙ (X·W3 + b3))·W2 + b2`.
#[derive(Debug, Clone)]
pub struct ExpertMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl ExpertMlp {
    pub(crate) fn build(src: &mut dyn ParamSource, prefix: &str, d: usize, inner: usize) -> Result<Self> {
        Ok(Self {
            w1: src.normal(&format!("{prefix}.w1"), &[d, inner])?,
            b1: src.zeros(&format!("{prefix}.b1"), &[inner])?,
            w2: src.normal(&format!("{prefix}.w2"), &[inner, d])?,
            b2: src.zeros(&format!("{prefix}.b2"), &[d])?,
            w3: src.zeros(&format!("{prefix}.w3"), &[d, inner])?,
            b3: src.ones(&format!("{prefix}.b3"), &[inner])?,
        })
    }

    fn named(&self) -> [(&'static str, &Var); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub(crate) fn map_vars(&self, f: &mut dyn FnMut(&Var) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            w1: f(&self.w1)?,
            b1: f(&self.b1)?,
            w2: f(&self.w2)?,
            b2: f(&self.b2)?,
            w3: f(&self.w3)?,
            b3: f(&self.b3)?,
        })
    }
}

/// Applies an expert to `x` (any rank, last dimension `d`).
pub fn swiglu_forward(expert: &ExpertMlp, x: &Tensor, activation: Activation) -> Result<Tensor> {
    let act = activation.apply(&ops::affine_last(x, &expert.w1, &expert.b1)?)?;
    let gate = ops::affine_last(x, &expert.w3, &expert.b3)?;
    ops::affine_last(&(act * gate)?, &expert.w2, &expert.b2)
}

/// Linear map from a hidden vector to one logit per expert.
#[derive(Debug, Clone)]
pub struct Router {
    pub weight: Var,
    pub bias: Var,
}

impl Router {
    pub fn num_params(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }
}

/// Experts and router replacing the MLP of one block.
#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub experts: Vec<ExpertMlp>,
    pub router: Router,
}

/// Per-call information the router needs besides the hidden states.
pub(crate) struct RoutingContext<'a> {
    pub cfg: &'a MoeConfig,
    pub mask: &'a [Vec<u8>],
    pub domains: &'a [Option<String>],
}

/// Routing decisions of one expert block for one batch.
///
/// A unit is a whole sequence under sentence granularity and a single
/// position under token granularity (unit `b·L + l`).
#[derive(Debug, Clone)]
pub struct RoutingRecord {
    pub block: usize,
    pub granularity: Granularity,
    pub batch_size: usize,
    pub seq_len: usize,
    /// `(units, E)` router logits; `None` under enforced routing.
    pub logits: Option<Tensor>,
    /// Selected experts per unit, best first.
    pub selected: Vec<Vec<usize>>,
    /// `(units, k)` gate weights, differentiable w.r.t. the router.
    pub gates: Option<Tensor>,
    pub gate_values: Vec<Vec<f64>>,
    /// Units that correspond to real (unmasked) tokens.
    pub valid_units: Vec<usize>,
    /// Owning sequence of every unit.
    pub unit_sequence: Vec<usize>,
}

impl RoutingRecord {
    /// Logits of the valid units, `(V, E)`.
    pub fn valid_logits(&self) -> Result<Option<Tensor>> {
        let Some(logits) = &self.logits else {
            return Ok(None);
        };
        if self.valid_units.len() == self.unit_sequence.len() {
            return Ok(Some(logits.clone()));
        }
        let idx: Vec<u32> = self.valid_units.iter().map(|&u| u as u32).collect();
        let idx = Tensor::from_vec(idx, self.valid_units.len(), &Device::Cpu)?;
        Ok(Some(logits.index_select(&idx, 0)?))
    }

    /// Sequence index of each valid unit, aligned with [`Self::valid_logits`].
    pub fn valid_unit_sequences(&self) -> Vec<usize> {
        self.valid_units.iter().map(|&u| self.unit_sequence[u]).collect()
    }

    /// Per-sequence routing distribution `(B, E)`: the softmax of the
    /// sequence's logits, or the mean token softmax under token granularity.
    pub fn example_probs(&self) -> Result<Option<Tensor>> {
        let Some(logits) = self.valid_logits()? else {
            return Ok(None);
        };
        let probs = ops::softmax_last(&logits)?;
        match self.granularity {
            Granularity::Sentence => Ok(Some(probs)),
            Granularity::Token => {
                let owners = self.valid_unit_sequences();
                let mut counts = vec![0usize; self.batch_size];
                for &s in &owners {
                    counts[s] += 1;
                }
                let mut avg = vec![0.0f64; self.batch_size * owners.len()];
                for (v, &s) in owners.iter().enumerate() {
                    avg[s * owners.len() + v] = 1.0 / counts[s] as f64;
                }
                let avg = ops::tensor_from_f64(
                    avg,
                    &[self.batch_size, owners.len()],
                    probs.dtype(),
                    &Device::Cpu,
                )?;
                Ok(Some(avg.matmul(&probs)?))
            }
        }
    }
}

/// Indices of the `k` largest values, best first; ties go to the lower index.
pub(crate) fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

impl MoeLayer {
    pub(crate) fn build(
        src: &mut dyn ParamSource,
        prefix: &str,
        d: usize,
        inner: usize,
        num_experts: usize,
    ) -> Result<Self> {
        let experts = (0..num_experts)
            .map(|e| ExpertMlp::build(src, &format!("{prefix}.expert.{e}"), d, inner))
            .collect::<Result<Vec<_>>>()?;
        let router = Router {
            weight: src.normal(&format!("{prefix}.router.weight"), &[d, num_experts])?,
            bias: src.zeros(&format!("{prefix}.router.bias"), &[num_experts])?,
        };
        Ok(Self { experts, router })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub(crate) fn params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        for (e, expert) in self.experts.iter().enumerate() {
            for (name, v) in expert.named() {
                out.push((format!("{prefix}.expert.{e}.{name}"), v.clone()));
            }
        }
        out.push((format!("{prefix}.router.weight"), self.router.weight.clone()));
        out.push((format!("{prefix}.router.bias"), self.router.bias.clone()));
    }

    pub(crate) fn map_vars(&self, f: &mut dyn FnMut(&Var) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            experts: self.experts.iter().map(|e| e.map_vars(f)).collect::<Result<_>>()?,
            router: Router {
                weight: f(&self.router.weight)?,
                bias: f(&self.router.bias)?,
            },
        })
    }

    /// Decides which experts see each unit. `block_input` is the block's
    /// input `X^(i-1)` of shape `(B, L, d)`.
    pub(crate) fn route(
        &self,
        block: usize,
        block_input: &Tensor,
        ctx: &RoutingContext<'_>,
    ) -> Result<RoutingRecord> {
        let (b, l, d) = block_input.dims3()?;
        let cfg = ctx.cfg;
        let (unit_sequence, valid_units): (Vec<usize>, Vec<usize>) = match cfg.granularity {
            Granularity::Sentence => ((0..b).collect(), (0..b).collect()),
            Granularity::Token => {
                let owners = (0..b * l).map(|u| u / l).collect();
                let valid = (0..b * l).filter(|&u| ctx.mask[u / l][u % l] == 1).collect();
                (owners, valid)
            }
        };
        let base = RoutingRecord {
            block,
            granularity: cfg.granularity,
            batch_size: b,
            seq_len: l,
            logits: None,
            selected: Vec::new(),
            gates: None,
            gate_values: Vec::new(),
            valid_units,
            unit_sequence,
        };

        if cfg.strategy == RoutingStrategy::Enforced {
            let per_sequence = ctx
                .domains
                .iter()
                .map(|d| {
                    let d = d.as_deref().ok_or_else(|| {
                        Error::Config("enforced routing requires a domain for every input".into())
                    })?;
                    cfg.expert_for(d)
                })
                .collect::<Result<Vec<_>>>()?;
            let selected: Vec<Vec<usize>> =
                base.unit_sequence.iter().map(|&s| vec![per_sequence[s]]).collect();
            let gate_values = vec![vec![1.0]; selected.len()];
            return Ok(RoutingRecord {
                selected,
                gate_values,
                ..base
            });
        }

        let router_input = match cfg.granularity {
            Granularity::Sentence => {
                let weights: Vec<f64> = ctx
                    .mask
                    .iter()
                    .flat_map(|row| {
                        let n = row.iter().filter(|&&m| m == 1).count().max(1) as f64;
                        row.iter().map(move |&m| f64::from(m) / n)
                    })
                    .collect();
                let weights =
                    ops::tensor_from_f64(weights, &[b, l, 1], block_input.dtype(), &Device::Cpu)?;
                block_input.broadcast_mul(&weights)?.sum(1)?
            }
            Granularity::Token => block_input.reshape((b * l, d))?,
        };
        let logits = ops::affine(&router_input, &self.router.weight, &self.router.bias)?;
        let host = ops::to_f64_rows(&logits.detach())?;
        let k = cfg.top_k;
        let selected: Vec<Vec<usize>> = host.iter().map(|row| top_k(row, k)).collect();
        let idx: Vec<u32> = selected.iter().flatten().map(|&e| e as u32).collect();
        let idx = Tensor::from_vec(idx, (selected.len(), k), &Device::Cpu)?;
        let gates = ops::softmax_last(&logits.gather(&idx, 1)?)?;
        let gate_values = ops::to_f64_rows(&gates.detach())?;
        Ok(RoutingRecord {
            logits: Some(logits),
            selected,
            gates: Some(gates),
            gate_values,
            ..base
        })
    }

    /// Sends every unit of `hidden` `(B, L, d)` through its selected experts
    /// and sums the gate-weighted outputs.
    pub(crate) fn dispatch(
        &self,
        hidden: &Tensor,
        record: &RoutingRecord,
        activation: Activation,
    ) -> Result<Tensor> {
        let (b, l, d) = hidden.dims3()?;
        let flat = hidden.reshape((b * l, d))?;
        let num_experts = self.experts.len();
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); num_experts];
        let mut gate_slots: Vec<Vec<u32>> = vec![Vec::new(); num_experts];
        for (unit, chosen) in record.selected.iter().enumerate() {
            let k = chosen.len();
            for (slot, &e) in chosen.iter().enumerate() {
                let gate = (unit * k + slot) as u32;
                match record.granularity {
                    Granularity::Sentence => {
                        for r in unit * l..(unit + 1) * l {
                            rows[e].push(r as u32);
                            gate_slots[e].push(gate);
                        }
                    }
                    Granularity::Token => {
                        rows[e].push(unit as u32);
                        gate_slots[e].push(gate);
                    }
                }
            }
        }
        let gates = record.gates.as_ref().map(|g| g.flatten_all()).transpose()?;
        let mut out = Tensor::zeros((b * l, d), hidden.dtype(), &Device::Cpu)?;
        for (e, expert) in self.experts.iter().enumerate() {
            if rows[e].is_empty() {
                continue;
            }
            let n = rows[e].len();
            let idx = Tensor::from_vec(std::mem::take(&mut rows[e]), n, &Device::Cpu)?;
            let mut y = swiglu_forward(expert, &flat.index_select(&idx, 0)?, activation)?;
            if let Some(g) = &gates {
                let slots = Tensor::from_vec(std::mem::take(&mut gate_slots[e]), n, &Device::Cpu)?;
                y = y.broadcast_mul(&g.index_select(&slots, 0)?.unsqueeze(1)?)?;
            }
            out = out.index_add(&idx, &y, 0)?;
        }
        Ok(out.reshape((b, l, d))?)
    }
}
