//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. [`RunConfig::to_text`] lists every key with its effective value
//! and parses back to the same configuration.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | model initialization and batch order |
//! | `data.dir` | `data/midi` | labeled SMF corpus (`metadata.csv` + files) |
//! | `data.audio_dir` | (none) | rendered WAV corpus; rendered in memory when absent |
//! | `data.per_class` | 0 | examples kept per class, 0 keeps the smallest class size |
//! | `split.seed` | 0 | balance and split seed |
//! | `render.seed` | 0 | instrument preset seed |
//! | `augment.variants` | 2 | variants per training example |
//! | `augment.semitones` | `-3,-2,-1,1,2,3` | transposition choices |
//! | `augment.tempo_factors` | `0.9,1.1` | tempo scaling choices |
//! | `mel.n_fft`, `mel.hop`, `mel.n_mels`, `mel.fmin`, `mel.fmax` | 2048, 480, 64, 20, 24000 | log-mel front end |
//! | `symbolic.d_model`, `.n_layers`, `.n_heads`, `.ff_dim`, `.max_len`, `.dropout` | 64, 2, 4, 256, 512, 0.1 | encoder |
//! | `audio.channels`, `.use_aff`, `.hidden_dim`, `.max_frames`, `.dropout` | `16,32,64,128`, false, 128, 1000, 0.2 | conv network |
//! | `train.epochs`, `.batch_size`, `.peak_lr`, `.warmup_fraction` | 4, 8, 5e-5, 0.1 | classifier training |
//! | `train.freeze_backbone` | false | keep pretrained weights fixed |
//! | `pretrain.dir` | `data.dir` | corpus for pretraining (labels ignored) |
//! | `pretrain.steps`, `.batch_size`, `.peak_lr` | 500, 8, 5e-5 | masked-pitch pretraining |
//! | `pretrain.epochs` | 4 | waveform-class pretraining (audio) |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::AugmentPolicy;
use crate::dsp::LogMelConfig;
use crate::error::{Error, Result};
use crate::models::{AudioConfig, PretrainConfig, SymbolicConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub audio_dir: Option<PathBuf>,
    pub per_class: usize,
    pub split_seed: u64,
    pub render_seed: u64,
    pub augment: AugmentPolicy,
    pub mel: LogMelConfig,
    pub symbolic: SymbolicConfig,
    pub audio: AudioConfig,
    pub train: TrainConfig,
    pub freeze_backbone: bool,
    pub pretrain_dir: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    pub pretrain_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: PathBuf::from("data/midi"),
            audio_dir: None,
            per_class: 0,
            split_seed: 0,
            render_seed: 0,
            augment: AugmentPolicy::default(),
            mel: LogMelConfig::default(),
            symbolic: SymbolicConfig::default(),
            audio: AudioConfig::default(),
            train: TrainConfig::default(),
            freeze_backbone: false,
            pretrain_dir: None,
            pretrain: PretrainConfig::default(),
            pretrain_epochs: 4,
        }
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.map.remove(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|_| Error::Config(format!("line {line}: bad value {v:?} for `{key}`"))),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.map.remove(key) {
            None => Ok(default),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("line {line}: bad list {v:?} for `{key}`"))))
                .collect(),
        }
    }

    fn take_path(&mut self, key: &str) -> Option<PathBuf> {
        self.map.remove(key).map(|(_, v)| PathBuf::from(v))
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            if map.insert(k.trim().to_string(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{}`", i + 1, k.trim())));
            }
        }
        let mut e = Entries { map };
        let d = RunConfig::default();
        let seed = e.take("seed", d.seed)?;
        let cfg = RunConfig {
            seed,
            data_dir: e.take_path("data.dir").unwrap_or(d.data_dir),
            audio_dir: e.take_path("data.audio_dir"),
            per_class: e.take("data.per_class", d.per_class)?,
            split_seed: e.take("split.seed", d.split_seed)?,
            render_seed: e.take("render.seed", d.render_seed)?,
            augment: AugmentPolicy {
                variants_per_example: e.take("augment.variants", d.augment.variants_per_example)?,
                semitone_choices: e.take_list("augment.semitones", d.augment.semitone_choices)?,
                tempo_factors: e.take_list("augment.tempo_factors", d.augment.tempo_factors)?,
            },
            mel: LogMelConfig {
                n_fft: e.take("mel.n_fft", d.mel.n_fft)?,
                hop: e.take("mel.hop", d.mel.hop)?,
                n_mels: e.take("mel.n_mels", d.mel.n_mels)?,
                fmin: e.take("mel.fmin", d.mel.fmin)?,
                fmax: e.take("mel.fmax", d.mel.fmax)?,
            },
            symbolic: SymbolicConfig {
                d_model: e.take("symbolic.d_model", d.symbolic.d_model)?,
                n_layers: e.take("symbolic.n_layers", d.symbolic.n_layers)?,
                n_heads: e.take("symbolic.n_heads", d.symbolic.n_heads)?,
                ff_dim: e.take("symbolic.ff_dim", d.symbolic.ff_dim)?,
                max_len: e.take("symbolic.max_len", d.symbolic.max_len)?,
                dropout_p: e.take("symbolic.dropout", d.symbolic.dropout_p)?,
            },
            audio: AudioConfig {
                channels: e.take_list("audio.channels", d.audio.channels)?,
                use_aff: e.take("audio.use_aff", d.audio.use_aff)?,
                hidden_dim: e.take("audio.hidden_dim", d.audio.hidden_dim)?,
                n_mels: 0,
                max_frames: e.take("audio.max_frames", d.audio.max_frames)?,
                dropout_p: e.take("audio.dropout", d.audio.dropout_p)?,
            },
            train: TrainConfig {
                epochs: e.take("train.epochs", d.train.epochs)?,
                batch_size: e.take("train.batch_size", d.train.batch_size)?,
                seed,
                peak_lr: e.take("train.peak_lr", d.train.peak_lr)?,
                warmup_fraction: e.take("train.warmup_fraction", d.train.warmup_fraction)?,
            },
            freeze_backbone: e.take("train.freeze_backbone", d.freeze_backbone)?,
            pretrain_dir: e.take_path("pretrain.dir"),
            pretrain: PretrainConfig {
                steps: e.take("pretrain.steps", d.pretrain.steps)?,
                batch_size: e.take("pretrain.batch_size", d.pretrain.batch_size)?,
                peak_lr: e.take("pretrain.peak_lr", d.pretrain.peak_lr)?,
                warmup_fraction: d.pretrain.warmup_fraction,
                seed,
            },
            pretrain_epochs: e.take("pretrain.epochs", d.pretrain_epochs)?,
        };
        if let Some((k, (line, _))) = e.map.into_iter().next() {
            return Err(Error::Config(format!("line {line}: unknown key `{k}`")));
        }
        let mut cfg = cfg;
        cfg.pretrain.warmup_fraction = cfg.train.warmup_fraction;
        cfg.audio.n_mels = cfg.mel.n_mels;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.symbolic.validate()?;
        self.audio.validate()?;
        if self.audio.n_mels != self.mel.n_mels {
            return Err(Error::Config("audio n_mels must equal mel.n_mels".into()));
        }
        if self.train.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.warmup_fraction) {
            return Err(Error::Config("train.warmup_fraction must lie in [0, 1)".into()));
        }
        if self.train.peak_lr < 0.0 || self.pretrain.peak_lr < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, sorted.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("data.dir", self.data_dir.display().to_string());
        if let Some(p) = &self.audio_dir {
            put("data.audio_dir", p.display().to_string());
        }
        put("data.per_class", self.per_class.to_string());
        put("split.seed", self.split_seed.to_string());
        put("render.seed", self.render_seed.to_string());
        put("augment.variants", self.augment.variants_per_example.to_string());
        put("augment.semitones", join(&self.augment.semitone_choices));
        put("augment.tempo_factors", join(&self.augment.tempo_factors));
        put("mel.n_fft", self.mel.n_fft.to_string());
        put("mel.hop", self.mel.hop.to_string());
        put("mel.n_mels", self.mel.n_mels.to_string());
        put("mel.fmin", self.mel.fmin.to_string());
        put("mel.fmax", self.mel.fmax.to_string());
        put("symbolic.d_model", self.symbolic.d_model.to_string());
        put("symbolic.n_layers", self.symbolic.n_layers.to_string());
        put("symbolic.n_heads", self.symbolic.n_heads.to_string());
        put("symbolic.ff_dim", self.symbolic.ff_dim.to_string());
        put("symbolic.max_len", self.symbolic.max_len.to_string());
        put("symbolic.dropout", self.symbolic.dropout_p.to_string());
        put("audio.channels", join(&self.audio.channels));
        put("audio.use_aff", self.audio.use_aff.to_string());
        put("audio.hidden_dim", self.audio.hidden_dim.to_string());
        put("audio.max_frames", self.audio.max_frames.to_string());
        put("audio.dropout", self.audio.dropout_p.to_string());
        put("train.epochs", self.train.epochs.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.peak_lr", self.train.peak_lr.to_string());
        put("train.warmup_fraction", self.train.warmup_fraction.to_string());
        put("train.freeze_backbone", self.freeze_backbone.to_string());
        if let Some(p) = &self.pretrain_dir {
            put("pretrain.dir", p.display().to_string());
        }
        put("pretrain.steps", self.pretrain.steps.to_string());
        put("pretrain.batch_size", self.pretrain.batch_size.to_string());
        put("pretrain.peak_lr", self.pretrain.peak_lr.to_string());
        put("pretrain.epochs", self.pretrain_epochs.to_string());
        m
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Configuration stored alongside a checkpoint, keys prefixed `cfg.`.
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (format!("cfg.{k}"), v)).collect()
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let text: String = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("cfg.").map(|k| format!("{k} = {v}\n")))
            .collect();
        Self::from_text(&text)
    }

    pub fn pretrain_dir(&self) -> &Path {
        self.pretrain_dir.as_deref().unwrap_or(&self.data_dir)
    }

    /// Settings sized for a single CPU core: the synthetic corpus trains
    /// to high accuracy within minutes.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.augment.variants_per_example = 0;
        c.mel.hop = 1920;
        c.symbolic = SymbolicConfig { d_model: 32, n_layers: 2, n_heads: 4, ff_dim: 64, max_len: 128, dropout_p: 0.1 };
        c.audio = AudioConfig {
            channels: vec![4, 8, 16, 32],
            use_aff: false,
            hidden_dim: 32,
            n_mels: c.mel.n_mels,
            max_frames: 96,
            dropout_p: 0.2,
        };
        c.train.peak_lr = 2e-3;
        c.pretrain.steps = 600;
        c.pretrain.peak_lr = 1e-3;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_text() {
        let c = RunConfig::from_text("# nothing\n\n").unwrap();
        assert_eq!(c, RunConfig { audio: AudioConfig { n_mels: 64, ..AudioConfig::default() }, ..RunConfig::default() });
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::desk();
        c.seed = 9;
        c.train.seed = 9;
        c.pretrain.seed = 9;
        c.audio_dir = Some(PathBuf::from("wav"));
        c.audio.use_aff = true;
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::from_meta(&c.to_meta()).unwrap(), c);
    }

    #[test]
    fn overrides_and_errors() {
        let c = RunConfig::from_text("seed = 3\ntrain.epochs=20\naudio.channels = 4, 8\nmel.n_mels = 32\n").unwrap();
        assert_eq!((c.seed, c.train.seed, c.train.epochs), (3, 3, 20));
        assert_eq!(c.audio.channels, vec![4, 8]);
        assert_eq!(c.audio.n_mels, 32);
        for bad in ["bogus = 1", "seed = x", "seed", "seed = 1\nseed = 2", "symbolic.n_heads = 5"] {
            assert!(matches!(RunConfig::from_text(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
