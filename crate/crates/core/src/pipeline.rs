//! End-to-end steps shared by the command line and the examples: corpus
//! loading and hashing, split preparation, feature extraction, pretraining,
//! classifier training and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::{augment_set, balance, from_labeled_set, split, LabeledExample, Split, SplitManifest};
use crate::dsp::{LogMelConfig, LogMelExtractor, LogMelSpectrogram, Matrix};
use crate::error::{Error, Result};
use crate::eval::{confusion, metrics, ConfusionMatrix, MetricsReport};
use crate::midi::{load_labeled_dataset, ColumnMap};
use crate::models::{
    evaluate, pretrain_masked, train, AnyModel, AudioHead, AudioModel, Classifier, Domain, EvalResult, Mode,
    PretrainReport, SymbolicModel, TrainReport,
};
use crate::nn::Checkpoint;
use crate::role::TrackRole;
use crate::synth::{preset_for_program, read_wav, render};
use crate::tokenizer::{encode_with_report, TokenSequence};

pub const METADATA_FILE: &str = "metadata.csv";

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// SHA-256 over `name\0len\0bytes` of every listed file, in the given order.
pub fn hash_files(dir: &Path, names: &[String]) -> Result<String> {
    let mut h = Sha256::new();
    for name in names {
        let bytes = fs::read(dir.join(name))?;
        h.update(name.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update([0]);
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

pub struct Corpus {
    pub examples: Vec<LabeledExample>,
    /// Hash of the metadata file and every loaded SMF.
    pub hash: String,
    /// Files listed in the metadata but absent.
    pub missing: Vec<String>,
}

/// Reads `dir/metadata.csv` and the SMF files it lists.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta = dir.join(METADATA_FILE);
    if !meta.exists() {
        return Err(Error::Dataset(format!("{} not found", meta.display())));
    }
    let set = load_labeled_dataset(dir, &meta, &ColumnMap::default())?;
    let mut names = vec![METADATA_FILE.to_string()];
    names.extend(set.examples.iter().map(|(f, _, _)| f.clone()));
    let hash = hash_files(dir, &names)?;
    let missing = set.missing.clone();
    Ok(Corpus { examples: from_labeled_set(set), hash, missing })
}

pub struct Splits {
    pub manifest: SplitManifest,
    /// Training examples followed by their augmented variants.
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[LabeledExample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Balances to `cfg.per_class` (or the smallest class), splits with
/// `cfg.split_seed` and augments the training part only.
pub fn prepare_splits(examples: &[LabeledExample], cfg: &RunConfig) -> Result<Splits> {
    let per_class = (cfg.per_class > 0).then_some(cfg.per_class);
    let balanced = balance(examples, per_class, cfg.split_seed)?;
    let manifest = split(&balanced, cfg.split_seed)?;
    let train = manifest.select(&balanced, Split::Train)?;
    let train = augment_set(&train, &cfg.augment, cfg.split_seed);
    let val = manifest.select(&balanced, Split::Val)?;
    let test = manifest.select(&balanced, Split::Test)?;
    Ok(Splits { manifest, train, val, test })
}

pub fn token_pairs(examples: &[LabeledExample], max_len: usize) -> Vec<(TokenSequence, usize)> {
    examples.iter().map(|e| (encode_with_report(&e.sequence, max_len).0, e.role.index())).collect()
}

/// Keeps at most the first `frames` frames.
pub fn crop_frames(spec: LogMelSpectrogram, frames: usize) -> LogMelSpectrogram {
    if spec.frames() <= frames {
        return spec;
    }
    let n = spec.n_mels;
    let mut values = Matrix::zeros(frames, n);
    values.data.copy_from_slice(&spec.values.data[..frames * n]);
    LogMelSpectrogram { values, ..spec }
}

/// Log-mel features of every example, cropped to `max_frames`. Ingested
/// examples are read from `audio_dir/<id>.wav` when given; everything else
/// is rendered with the `render_seed` presets.
pub fn spectrograms(
    examples: &[LabeledExample],
    render_seed: u64,
    mel: &LogMelConfig,
    max_frames: usize,
    audio_dir: Option<&Path>,
) -> Result<Vec<LogMelSpectrogram>> {
    let extractor = LogMelExtractor::new(*mel)?;
    examples
        .iter()
        .map(|e| {
            let clip = match audio_dir {
                Some(dir) if !e.is_augmented() => {
                    let path = dir.join(format!("{}.wav", e.id));
                    let bytes = fs::read(&path).map_err(|err| Error::Dataset(format!("{}: {err}", path.display())))?;
                    read_wav(&bytes)?
                }
                _ => render(&e.sequence, render_seed),
            };
            Ok(crop_frames(extractor.extract(&clip)?, max_frames))
        })
        .collect()
}

pub fn audio_pairs(examples: &[LabeledExample], cfg: &RunConfig) -> Result<Vec<(LogMelSpectrogram, usize)>> {
    let specs = spectrograms(examples, cfg.render_seed, &cfg.mel, cfg.audio.max_frames, cfg.audio_dir.as_deref())?;
    Ok(specs.into_iter().zip(examples).map(|(s, e)| (s, e.role.index())).collect())
}

/// Waveform class of the preset that renders `example`.
pub fn waveform_label(example: &LabeledExample, render_seed: u64) -> usize {
    preset_for_program(example.sequence.program(), render_seed).waveform.index()
}

/// Masked-pitch pretraining on token sequences; returns the encoder
/// checkpoint.
pub fn pretrain_symbolic(examples: &[LabeledExample], cfg: &RunConfig) -> Result<(Checkpoint, PretrainReport)> {
    let corpus: Vec<TokenSequence> = token_pairs(examples, cfg.symbolic.max_len).into_iter().map(|(t, _)| t).collect();
    let mut model = SymbolicModel::new(cfg.symbolic.clone(), cfg.seed)?;
    let report = pretrain_masked(&mut model, &corpus, &cfg.pretrain)?;
    let mut ckpt = model.backbone_checkpoint();
    ckpt.meta.extend(cfg.to_meta());
    Ok((ckpt, report))
}

/// Waveform-class pretraining of the audio backbone; returns the
/// `backbone.*` checkpoint.
pub fn pretrain_audio(examples: &[LabeledExample], cfg: &RunConfig) -> Result<(Checkpoint, TrainReport)> {
    let specs = spectrograms(examples, cfg.render_seed, &cfg.mel, cfg.audio.max_frames, None)?;
    let data: Vec<_> = specs.into_iter().zip(examples).map(|(s, e)| (s, waveform_label(e, cfg.render_seed))).collect();
    let mut model = AudioModel::new(cfg.audio.clone(), AudioHead::Waveforms, cfg.seed)?;
    let tc = crate::models::TrainConfig { epochs: cfg.pretrain_epochs, batch_size: cfg.pretrain.batch_size, peak_lr: cfg.pretrain.peak_lr, ..cfg.train.clone() };
    let report = train(&mut model, &data, &[], &tc)?;
    let mut ckpt = model.backbone_checkpoint();
    ckpt.meta.extend(cfg.to_meta());
    Ok((ckpt, report))
}

pub struct Trained {
    pub model: AnyModel,
    pub report: TrainReport,
    /// Parameters initialized fresh in fine-tune mode.
    pub fresh: Vec<String>,
}

fn start<M: Classifier>(
    model: &mut M,
    load: impl FnOnce(&mut M, &Checkpoint) -> Result<Vec<String>>,
    prefix: &str,
    mode: Mode,
    init: Option<&Checkpoint>,
    freeze: bool,
) -> Result<Vec<String>> {
    match (mode, init) {
        (Mode::FromScratch, _) => Ok(Vec::new()),
        (Mode::FineTune, None) => Err(Error::Usage("fine-tune mode requires a pretrained checkpoint".into())),
        (Mode::FineTune, Some(ckpt)) => {
            let fresh = load(model, ckpt)?;
            if freeze {
                model.params_mut().freeze_prefixes(&[prefix]);
            }
            Ok(fresh)
        }
    }
}

/// Builds the classifier for `domain`, optionally loads a pretrained
/// backbone, and trains on the train split with validation-based
/// selection.
pub fn train_classifier(
    domain: Domain,
    mode: Mode,
    init: Option<&Checkpoint>,
    splits: &Splits,
    cfg: &RunConfig,
) -> Result<Trained> {
    match domain {
        Domain::Symbolic => {
            let mut m = SymbolicModel::new(cfg.symbolic.clone(), cfg.seed)?;
            let fresh = start(&mut m, |m, c| m.load_backbone(c), "enc.", mode, init, cfg.freeze_backbone)?;
            let tr = token_pairs(&splits.train, cfg.symbolic.max_len);
            let va = token_pairs(&splits.val, cfg.symbolic.max_len);
            let report = train(&mut m, &tr, &va, &cfg.train)?;
            Ok(Trained { model: AnyModel::Symbolic(m), report, fresh })
        }
        Domain::Audio => {
            let mut m = AudioModel::new(cfg.audio.clone(), AudioHead::Roles, cfg.seed)?;
            let fresh = start(&mut m, |m, c| m.load_backbone(c), "backbone.", mode, init, cfg.freeze_backbone)?;
            let tr = audio_pairs(&splits.train, cfg)?;
            let va = audio_pairs(&splits.val, cfg)?;
            let report = train(&mut m, &tr, &va, &cfg.train)?;
            Ok(Trained { model: AnyModel::Audio(m), report, fresh })
        }
    }
}

pub struct Evaluation {
    pub result: EvalResult,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
}

pub fn evaluate_examples(model: &AnyModel, examples: &[LabeledExample], cfg: &RunConfig) -> Result<Evaluation> {
    let result = match model {
        AnyModel::Symbolic(m) => evaluate(m, &token_pairs(examples, m.config.max_len))?,
        AnyModel::Audio(m) => evaluate(m, &audio_pairs(examples, cfg)?)?,
    };
    let truth: Vec<TrackRole> = examples.iter().map(|e| e.role).collect();
    let pred: Vec<TrackRole> = result.predictions.iter().map(|&p| TrackRole::from_index(p).expect("six classes")).collect();
    let cm = confusion(&truth, &pred)?;
    let metrics = metrics(&cm)?;
    Ok(Evaluation { result, confusion: cm, metrics })
}

/// `key=value` lines, sorted by key.
pub fn manifest_text(entries: &BTreeMap<String, String>) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
