//! Track-role classifiers over token sequences and log-mel spectrograms,
//! their pretraining objectives and a shared training loop.

mod audio;
mod pretrain;
mod symbolic;
mod train;

pub use audio::{prepare_input, AudioConfig, AudioHead, AudioModel, INPUT_OFFSET_DB, INPUT_SCALE_DB};
pub use pretrain::{mask_positions, masked_pitch_loss, pretrain_masked, PretrainConfig, PretrainReport, MASK_FRACTION};
pub use symbolic::{SymbolicConfig, SymbolicModel};
pub use train::{evaluate, train, EpochRecord, EvalResult, History, Mode, TrainConfig, TrainReport};

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::ChaCha8Rng;

use crate::dsp::LogMelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Graph, ParamId, ParamStore, Var};
use crate::role::{TrackRole, NUM_ROLES};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Symbolic,
    Audio,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Symbolic => "symbolic",
            Domain::Audio => "audio",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symbolic" => Ok(Domain::Symbolic),
            "audio" => Ok(Domain::Audio),
            _ => Err(Error::Usage(format!("unknown domain {s:?} (expected symbolic or audio)"))),
        }
    }
}

/// Mean loss and hit count of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchEval {
    pub loss: f64,
    pub correct: usize,
    pub n: usize,
}

/// A model trainable by [`train`].
pub trait Classifier {
    type Input;

    fn num_classes(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Training-mode forward and backward over one batch: adds gradients
    /// of the mean cross-entropy into the parameter buffers and updates
    /// any running statistics.
    fn train_batch(&mut self, batch: &[(&Self::Input, usize)], rng: &mut ChaCha8Rng) -> Result<BatchEval>;

    /// Evaluation-mode logits, one row per input.
    fn logits(&self, inputs: &[&Self::Input]) -> Result<Vec<Vec<f64>>>;
}

/// `x W + b` for `x` of shape `(n, in)`.
pub(crate) fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let y = g.matmul(x, wv)?;
    g.add(y, bv)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Role and class probabilities from six logits.
pub fn predict_from_logits(logits: &[f64]) -> Result<(TrackRole, Vec<f64>)> {
    if logits.len() != NUM_ROLES || logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric(format!("expected {NUM_ROLES} finite logits, got {logits:?}")));
    }
    let probs = crate::nn::softmax(logits);
    let role = TrackRole::from_index(argmax(&probs)).expect("six classes");
    Ok((role, probs))
}

/// `<role> p=[p0,...,p5]` with six decimals.
pub fn format_prediction(role: TrackRole, probs: &[f64]) -> String {
    let ps: Vec<String> = probs.iter().map(|p| format!("{p:.6}")).collect();
    format!("{role} p=[{}]", ps.join(","))
}

pub enum ModelInput {
    Tokens(TokenSequence),
    LogMel(LogMelSpectrogram),
}

impl ModelInput {
    pub fn domain(&self) -> Domain {
        match self {
            ModelInput::Tokens(_) => Domain::Symbolic,
            ModelInput::LogMel(_) => Domain::Audio,
        }
    }
}

/// Either classifier, as stored in a checkpoint.
pub enum AnyModel {
    Symbolic(SymbolicModel),
    Audio(AudioModel),
}

impl AnyModel {
    pub fn domain(&self) -> Domain {
        match self {
            AnyModel::Symbolic(_) => Domain::Symbolic,
            AnyModel::Audio(_) => Domain::Audio,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            AnyModel::Symbolic(m) => &m.store,
            AnyModel::Audio(m) => &m.store,
        }
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        match self {
            AnyModel::Symbolic(m) => m.config.to_meta(),
            AnyModel::Audio(m) => m.config.to_meta(),
        }
    }

    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Checkpoint {
        let mut meta = self.meta();
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        Checkpoint::from_store(self.params(), meta)
    }

    /// Rebuilds the architecture named in the checkpoint metadata and
    /// restores every parameter.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let domain: Domain = ckpt
            .meta
            .get("domain")
            .ok_or_else(|| Error::Checkpoint("checkpoint metadata lacks `domain`".into()))?
            .parse()
            .map_err(|_| Error::Checkpoint("checkpoint has an unknown domain".into()))?;
        let mut model = match domain {
            Domain::Symbolic => AnyModel::Symbolic(SymbolicModel::new(SymbolicConfig::from_meta(&ckpt.meta)?, 0)?),
            Domain::Audio => AnyModel::Audio(AudioModel::new(AudioConfig::from_meta(&ckpt.meta)?, AudioHead::Roles, 0)?),
        };
        let store = match &mut model {
            AnyModel::Symbolic(m) => &mut m.store,
            AnyModel::Audio(m) => &mut m.store,
        };
        ckpt.restore(store)?;
        Ok(model)
    }

    pub fn predict(&self, input: &ModelInput) -> Result<(TrackRole, Vec<f64>)> {
        let logits = match (self, input) {
            (AnyModel::Symbolic(m), ModelInput::Tokens(t)) => m.logits(&[t])?,
            (AnyModel::Audio(m), ModelInput::LogMel(s)) => m.logits(&[s])?,
            _ => {
                return Err(Error::Invalid(format!(
                    "{} model cannot take {} input",
                    self.domain(),
                    input.domain()
                )))
            }
        };
        predict_from_logits(&logits[0])
    }
}

/// Backbone-only checkpoint: parameters under `prefix` plus `meta`.
pub(crate) fn backbone_checkpoint(store: &ParamStore, meta: BTreeMap<String, String>, prefix: &str) -> Checkpoint {
    Checkpoint::from_store_filtered(store, meta, |n| n.starts_with(prefix))
}

/// Loads a backbone checkpoint into `store`. The checkpoint must hold only
/// `prefix` parameters, agree on the listed metadata keys and cover every
/// `prefix` parameter of the model. Returns the freshly initialized names.
pub(crate) fn load_backbone(
    store: &mut ParamStore,
    ckpt: &Checkpoint,
    prefix: &str,
    ours: &BTreeMap<String, String>,
    keys: &[&str],
) -> Result<Vec<String>> {
    if let Some(name) = ckpt.names().find(|n| !n.starts_with(prefix)) {
        return Err(Error::Checkpoint(format!("pretrained checkpoint carries non-backbone parameter {name}")));
    }
    for &k in keys {
        if let (Some(a), Some(b)) = (ours.get(k), ckpt.meta.get(k)) {
            if a != b {
                return Err(Error::Checkpoint(format!("pretrained `{k}` is {b}, model has {a}")));
            }
        }
    }
    let fresh = ckpt.load_matching(store)?;
    if let Some(name) = fresh.iter().find(|n| n.starts_with(prefix)) {
        return Err(Error::Checkpoint(format!("pretrained checkpoint lacks backbone parameter {name}")));
    }
    Ok(fresh)
}

pub(crate) fn meta_get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta.get(key)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks `{key}`")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("checkpoint metadata `{key}` is malformed")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_rules() {
        let z = [0.3, -1.0, 2.0, 2.0, 0.0, 1.5];
        let (role, p) = predict_from_logits(&z).unwrap();
        assert_eq!(role, TrackRole::MainMelody);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = z.iter().map(|v| v + 37.25).collect();
        let (r2, p2) = predict_from_logits(&shifted).unwrap();
        assert_eq!(r2, role);
        for (a, b) in p.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(predict_from_logits(&[0.0; 6]).unwrap().0, TrackRole::Accompaniment);
        assert!(predict_from_logits(&[0.0; 5]).is_err());
    }

    #[test]
    fn prediction_line() {
        let line = format_prediction(TrackRole::Bass, &[0.1, 0.5, 0.1, 0.1, 0.1, 0.1]);
        assert_eq!(line, "bass p=[0.100000,0.500000,0.100000,0.100000,0.100000,0.100000]");
    }
}
