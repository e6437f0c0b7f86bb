use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::schedule::lr_schedule;
use super::trainer::{TrainBatch, Trainer};
use crate::eval::{evaluate_model, EvalMode, EvalReport};
use crate::pipeline::{Corpus, PairEntry};
use crate::{Error, Result};

/// Outcome of feeding one validation score to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Patience-based stopping on a score to maximize.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records the score measured at `step`. Stops once the number of
    /// consecutive validations without strict improvement exceeds the
    /// patience.
    pub fn observe(&mut self, step: usize, score: f64) -> Verdict {
        match self.best {
            Some((_, best)) if score <= best => {
                self.stale += 1;
                if self.stale > self.patience {
                    Verdict::Stop
                } else {
                    Verdict::NoImprovement
                }
            }
            _ => {
                self.best = Some((step, score));
                self.stale = 0;
                Verdict::Improved
            }
        }
    }

    /// Step and score of the best validation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    /// `train` or `valid`.
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub router_ce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutual_info: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1max: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub domain_f1max: BTreeMap<String, f64>,
    /// `best` when a validation improved, `early_stop` when patience ran out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
}

impl HistoryRecord {
    fn new(step: usize, epoch: usize, split: &str) -> Self {
        Self {
            step,
            epoch,
            split: split.into(),
            loss: None,
            mnr: None,
            router_ce: None,
            mutual_info: None,
            lr: None,
            temperature: None,
            f1max: None,
            domain_f1max: BTreeMap::new(),
            event: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_step: usize,
    pub best_f1max: f64,
    /// Validation report of the returned (best) weights.
    pub best_report: EvalReport,
    pub stopped_early: bool,
    pub steps_run: usize,
    pub history: Vec<HistoryRecord>,
}

/// Trains until `max_epochs` or early stopping, validating every
/// `validate_every` steps and once more at the end, then restores the best
/// weights.
///
/// The validation score is the mean over domains of the full-range F1max.
/// Each history record is also passed to `sink` as it is produced.
pub fn training_loop(
    trainer: &mut Trainer,
    corpus: &Corpus,
    train: &[PairEntry],
    valid: &[PairEntry],
    sink: &mut dyn FnMut(&HistoryRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let cfg = trainer.config().clone();
    let per_epoch = train.len() / cfg.batch_size;
    if per_epoch == 0 {
        return Err(Error::Data(format!(
            "training split has {} pairs, fewer than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let total_steps = per_epoch * cfg.max_epochs;
    lr_schedule(0, &cfg, total_steps)?;

    let mut history = Vec::new();
    let mut emit = |r: HistoryRecord, history: &mut Vec<HistoryRecord>| -> Result<()> {
        sink(&r)?;
        history.push(r);
        Ok(())
    };
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<(Vec<candle_core::Tensor>, EvalReport)> = None;
    let mut stopped_early = false;
    let mut local = 0usize;
    let mut last_validated = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut validate = |trainer: &Trainer,
                        epoch: usize,
                        history: &mut Vec<HistoryRecord>,
                        best: &mut Option<(Vec<candle_core::Tensor>, EvalReport)>,
                        emit: &mut dyn FnMut(HistoryRecord, &mut Vec<HistoryRecord>) -> Result<()>|
     -> Result<Verdict> {
        let report = evaluate_model(trainer.model(), corpus, valid, EvalMode::Validation)?;
        let score = report
            .mean_domain_f1max()
            .ok_or_else(|| Error::Data("validation produced no F1max".into()))?;
        let verdict = stopper.observe(trainer.step(), score);
        let mut rec = HistoryRecord::new(trainer.step(), epoch, "valid");
        rec.f1max = Some(score);
        rec.domain_f1max = report
            .per_domain
            .iter()
            .filter_map(|(d, m)| m.f1max.map(|f| (d.clone(), f)))
            .collect();
        match verdict {
            Verdict::Improved => {
                rec.event = Some("best".into());
                *best = Some((trainer.snapshot()?, report));
            }
            Verdict::Stop => rec.event = Some("early_stop".into()),
            Verdict::NoImprovement => {}
        }
        emit(rec, history)?;
        Ok(verdict)
    };

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(trainer.rng_mut());
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = TrainBatch::from_pairs(chunk.iter().map(|&i| &train[i]), corpus)?;
            let lr = lr_schedule(local, &cfg, total_steps)?;
            let losses = trainer.train_step(&batch, lr)?;
            local += 1;
            let mut rec = HistoryRecord::new(trainer.step(), epoch, "train");
            rec.loss = Some(losses.total);
            rec.mnr = Some(losses.mnr);
            rec.router_ce = losses.router_ce;
            rec.mutual_info = losses.mutual_info;
            rec.lr = Some(lr);
            rec.temperature = Some(losses.temperature);
            emit(rec, &mut history)?;
            if local % cfg.validate_every == 0 {
                last_validated = Some(local);
                if validate(trainer, epoch, &mut history, &mut best, &mut emit)? == Verdict::Stop {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    if !stopped_early && last_validated != Some(local) {
        validate(trainer, cfg.max_epochs.saturating_sub(1), &mut history, &mut best, &mut emit)?;
    }
    let (snapshot, best_report) = best.expect("at least one validation ran");
    trainer.restore(&snapshot)?;
    let (best_step, best_f1max) = stopper.best().expect("a best score exists");
    Ok(TrainOutcome {
        best_step,
        best_f1max,
        best_report,
        stopped_early,
        steps_run: local,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_after_patience_exceeded() {
        let mut es = EarlyStopping::new(3);
        let verdicts: Vec<_> = [0.8, 0.79, 0.78, 0.77, 0.76]
            .iter()
            .enumerate()
            .map(|(i, &s)| es.observe(i * 10, s))
            .collect();
        assert_eq!(
            verdicts,
            [
                Verdict::Improved,
                Verdict::NoImprovement,
                Verdict::NoImprovement,
                Verdict::NoImprovement,
                Verdict::Stop
            ]
        );
        assert_eq!(es.best(), Some((0, 0.8)));
    }

    #[test]
    fn improving_run_never_stops() {
        let mut es = EarlyStopping::new(1);
        for i in 0..20 {
            assert_eq!(es.observe(i, i as f64 / 20.0), Verdict::Improved);
        }
    }

    #[test]
    fn equal_score_is_not_an_improvement() {
        let mut es = EarlyStopping::new(1);
        es.observe(0, 0.5);
        assert_eq!(es.observe(1, 0.5), Verdict::NoImprovement);
        assert_eq!(es.best(), Some((0, 0.5)));
    }
}
