use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::config::TrainConfig;
use crate::{ops, Result};

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: i32,
}

/// AdamW with decoupled weight decay.
///
/// Parameters that received no gradient in a step are left untouched,
/// including their decay and moment estimates. Sparse expert dispatch
/// relies on this: an expert that saw no unit in a batch must not move.
#[derive(Debug)]
pub struct AdamW {
    params: Vec<Var>,
    decay: Vec<bool>,
    state: Vec<Option<Moments>>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    /// `params` pairs each variable with whether weight decay applies to it.
    pub fn new(params: Vec<(Var, bool)>, cfg: &TrainConfig) -> Self {
        let n = params.len();
        let (params, decay) = params.into_iter().unzip();
        Self {
            params,
            decay,
            state: vec![None; n],
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (i, var) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let theta = var.as_tensor().detach();
            let st = match self.state[i].take() {
                Some(s) => s,
                None => Moments {
                    m: theta.zeros_like()?,
                    v: theta.zeros_like()?,
                    steps: 0,
                },
            };
            let steps = st.steps + 1;
            let m = ((st.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((st.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / (1.0 - self.beta1.powi(steps)))?;
            let v_hat = (&v / (1.0 - self.beta2.powi(steps)))?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let mut next = theta;
            if self.decay[i] && self.weight_decay != 0.0 {
                next = (next * (1.0 - lr * self.weight_decay))?;
            }
            next = (next - (update * lr)?)?;
            var.set(&next)?;
            self.state[i] = Some(Moments { m, v, steps });
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm measured before rescaling.
pub fn clip_grad_norm(params: &[Var], grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let mut total = 0.0;
    for var in params {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += ops::scalar_f64(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = total.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for var in params {
            if let Some(g) = grads.remove(var.as_tensor()) {
                grads.insert(var.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}
