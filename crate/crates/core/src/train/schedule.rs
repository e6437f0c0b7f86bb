use super::config::{Scheduler, TrainConfig};
use crate::{Error, Result};

/// Learning rate at `step` of a run lasting `total_steps`.
///
/// Both schedules ramp linearly from 0 to `learning_rate` over
/// `warmup_steps` and then follow a half cosine down to 0 at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig, total_steps: usize) -> Result<f64> {
    if total_steps < cfg.warmup_steps {
        return Err(Error::Config(format!(
            "run of {total_steps} steps is shorter than {} warmup steps",
            cfg.warmup_steps
        )));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond total {total_steps}")));
    }
    let peak = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return Ok(peak * step as f64 / cfg.warmup_steps as f64);
    }
    let decay_len = total_steps - cfg.warmup_steps;
    if decay_len == 0 {
        return Ok(peak);
    }
    let progress = (step - cfg.warmup_steps) as f64 / decay_len as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(match cfg.scheduler {
        Scheduler::OneCycle | Scheduler::Cosine => peak * cosine,
    })
}
