//! Masked-pitch pretraining of the symbolic encoder.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::symbolic::SymbolicModel;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Graph, LrSchedule, Var, WARMUP_FRACTION};
use crate::seed;
use crate::tokenizer::{TokenSequence, PITCH_MASK_ID};

pub const MASK_FRACTION: f64 = 0.15;
const EVAL_SEQUENCES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 500, batch_size: 8, peak_lr: crate::nn::PEAK_LR, warmup_fraction: WARMUP_FRACTION, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Masked-pitch loss on a fixed held-in probe set before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub step_losses: Vec<f64>,
}

/// `round(0.15 * len)` distinct sorted positions (at least one when
/// `len > 0`), determined by `seed`.
pub fn mask_positions(len: usize, seed: u64) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let k = ((MASK_FRACTION * len as f64).round() as usize).clamp(1, len);
    let mut v = sample(&mut seed::rng(seed), len, k).into_vec();
    v.sort_unstable();
    v
}

fn masked_loss_graph(
    model: &SymbolicModel,
    g: &mut Graph,
    tokens: &TokenSequence,
    positions: &[usize],
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut input = tokens.tuples[..tokens.len().min(model.config.max_len)].to_vec();
    let labels: Vec<usize> = positions.iter().map(|&p| input[p].pitch as usize).collect();
    for &p in positions {
        input[p].pitch = PITCH_MASK_ID;
    }
    let h = model.encode(g, &input, train, rng)?;
    let z = model.mlm_logits(g, h, positions)?;
    g.cross_entropy(z, &labels)
}

/// Evaluation-mode masked-pitch loss of one sequence.
pub fn masked_pitch_loss(model: &SymbolicModel, tokens: &TokenSequence, positions: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = masked_loss_graph(model, &mut g, tokens, positions, false, &mut seed::rng(0))?;
    Ok(g.value(l).item())
}

fn usable_len(model: &SymbolicModel, t: &TokenSequence) -> usize {
    t.len().min(model.config.max_len)
}

fn probe_loss(model: &SymbolicModel, corpus: &[TokenSequence], seed: u64) -> Result<f64> {
    let probe: Vec<&TokenSequence> = corpus.iter().filter(|t| !t.is_empty()).take(EVAL_SEQUENCES).collect();
    let mut total = 0.0;
    for (i, t) in probe.iter().enumerate() {
        let pos = mask_positions(usable_len(model, t), seed::derive(seed, &format!("probe/{i}")));
        total += masked_pitch_loss(model, t, &pos)?;
    }
    Ok(total / probe.len() as f64)
}

/// Adds the `mlm.*` head and trains encoder and head to recover masked
/// pitches. Zero steps leave the encoder untouched.
pub fn pretrain_masked(model: &mut SymbolicModel, corpus: &[TokenSequence], cfg: &PretrainConfig) -> Result<PretrainReport> {
    let usable: Vec<&TokenSequence> = corpus.iter().filter(|t| !t.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Dataset("pretraining corpus has no non-empty sequences".into()));
    }
    model.add_mlm_head(cfg.seed);
    let initial_loss = probe_loss(model, corpus, cfg.seed)?;
    let mut report = PretrainReport { initial_loss, final_loss: initial_loss, step_losses: Vec::new() };
    if cfg.steps == 0 {
        return Ok(report);
    }
    let schedule = LrSchedule::custom(
        cfg.peak_lr,
        cfg.steps as u64,
        (cfg.warmup_fraction * cfg.steps as f64).floor() as u64,
    )?;
    let mut adam = AdamState::new();
    let batch = cfg.batch_size.max(1);
    for step in 0..cfg.steps {
        let mut rng = seed::rng(seed::derive(cfg.seed, &format!("pretrain/{step}")));
        model.store.zero_grads();
        let mut loss = 0.0;
        for _ in 0..batch {
            let t = usable[rng.gen_range(0..usable.len())];
            let pos = mask_positions(usable_len(model, t), rng.gen());
            let mut drop_rng = seed::rng(rng.gen());
            let mut g = Graph::new();
            let l = masked_loss_graph(model, &mut g, t, &pos, true, &mut drop_rng)?;
            let l = g.scale(l, 1.0 / batch as f64);
            loss += g.value(l).item();
            g.backward(l)?;
            g.accumulate_param_grads(&mut model.store);
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite pretraining loss at step {step}")));
        }
        adam_step(&mut model.store, &mut adam, schedule.lr_at(step as u64 + 1)?)?;
        report.step_losses.push(loss);
    }
    report.final_loss = probe_loss(model, corpus, cfg.seed)?;
    Ok(report)
}
