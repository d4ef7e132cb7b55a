use std::fmt;

use rand::seq::SliceRandom;

use super::{argmax, Classifier};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, LrSchedule, Tensor, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, WARMUP_FRACTION};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FineTune,
    FromScratch,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FineTune => "fine-tune",
            Mode::FromScratch => "from-scratch",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine-tune" | "fine_tune" => Ok(Mode::FineTune),
            "from-scratch" | "from_scratch" => Ok(Mode::FromScratch),
            _ => Err(Error::Usage(format!("unknown mode {s:?} (expected fine-tune or from-scratch)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 4, batch_size: 8, seed: 0, peak_lr: crate::nn::PEAK_LR, warmup_fraction: WARMUP_FRACTION }
    }
}

impl TrainConfig {
    pub fn batches_per_epoch(&self, n_train: usize) -> usize {
        batches(n_train, self.batch_size.max(1)).len()
    }

    pub fn total_steps(&self, n_train: usize) -> u64 {
        (self.epochs * self.batches_per_epoch(n_train)) as u64
    }

    pub fn schedule(&self, n_train: usize) -> Result<LrSchedule> {
        let total = self.total_steps(n_train);
        LrSchedule::custom(self.peak_lr, total, (self.warmup_fraction * total as f64).floor() as u64)
    }

    /// Optimizer and schedule constants, for run manifests.
    pub fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("peak_lr".into(), self.peak_lr.to_string()),
            ("warmup_fraction".into(), self.warmup_fraction.to_string()),
            ("adam_beta1".into(), ADAM_BETA1.to_string()),
            ("adam_beta2".into(), ADAM_BETA2.to_string()),
            ("adam_eps".into(), ADAM_EPS.to_string()),
        ]
    }
}

/// Index ranges of the batches over `n` items; a trailing batch of one
/// joins the previous batch so batch statistics are never degenerate.
fn batches(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// `epoch,split,loss,accuracy` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,accuracy\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", r.epoch, r.split, r.loss, r.accuracy));
        }
        s
    }

    pub fn val(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.split == "val")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: History,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Evaluation-mode mean cross-entropy, accuracy and argmax predictions.
pub fn evaluate<M: Classifier>(model: &M, data: &[(M::Input, usize)]) -> Result<EvalResult> {
    if data.is_empty() {
        return Ok(EvalResult { loss: 0.0, accuracy: 0.0, predictions: Vec::new() });
    }
    let inputs: Vec<&M::Input> = data.iter().map(|(x, _)| x).collect();
    let logits = model.logits(&inputs)?;
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(data.len());
    let mut correct = 0;
    for (z, (_, label)) in logits.iter().zip(data) {
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[*label];
        let p = argmax(z);
        correct += (p == *label) as usize;
        predictions.push(p);
    }
    let n = data.len() as f64;
    Ok(EvalResult { loss: loss / n, accuracy: correct as f64 / n, predictions })
}

/// Adam with the warmup/decay schedule over shuffled mini-batches. After
/// each epoch the validation split is scored; the parameters with the best
/// validation accuracy (earliest on ties) are restored at the end.
pub fn train<M: Classifier>(
    model: &mut M,
    train_set: &[(M::Input, usize)],
    val_set: &[(M::Input, usize)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut report = TrainReport { history: History::default(), best_epoch: None, best_val_accuracy: 0.0, steps: 0 };
    if cfg.epochs == 0 || train_set.is_empty() {
        return Ok(report);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let schedule = cfg.schedule(train_set.len())?;
    let mut adam = AdamState::new();
    let mut rng = seed::rng(seed::derive(cfg.seed, "train"));
    let mut best: Option<Vec<Tensor>> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &format!("epoch/{epoch}"))));
        let (mut loss_sum, mut correct) = (0.0, 0);
        for range in batches(order.len(), cfg.batch_size) {
            let batch: Vec<(&M::Input, usize)> = order[range].iter().map(|&i| (&train_set[i].0, train_set[i].1)).collect();
            model.params_mut().zero_grads();
            let r = model.train_batch(&batch, &mut rng)?;
            if !r.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {} at step {step}", r.loss)));
            }
            step += 1;
            adam_step(model.params_mut(), &mut adam, schedule.lr_at(step)?)
                .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
            loss_sum += r.loss * r.n as f64;
            correct += r.correct;
        }
        let n = train_set.len() as f64;
        report.history.records.push(EpochRecord { epoch, split: "train", loss: loss_sum / n, accuracy: correct as f64 / n });
        if !val_set.is_empty() {
            let v = evaluate(model, val_set)?;
            report.history.records.push(EpochRecord { epoch, split: "val", loss: v.loss, accuracy: v.accuracy });
            if report.best_epoch.is_none() || v.accuracy > report.best_val_accuracy {
                report.best_epoch = Some(epoch);
                report.best_val_accuracy = v.accuracy;
                best = Some(model.params().iter().map(|p| p.value.clone()).collect());
            }
        }
    }
    report.steps = step;
    if let Some(values) = best {
        for (p, v) in model.params_mut().iter_mut().zip(values) {
            p.value = v;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_ranges() {
        assert_eq!(batches(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(batches(9, 4), vec![0..4, 4..9]);
        assert_eq!(batches(1, 4), vec![0..1]);
        assert!(batches(0, 4).is_empty());
    }

    #[test]
    fn history_csv() {
        let h = History { records: vec![EpochRecord { epoch: 1, split: "train", loss: 1.5, accuracy: 0.25 }] };
        assert_eq!(h.to_csv(), "epoch,split,loss,accuracy\n1,train,1.500000,0.250000\n");
    }
}
