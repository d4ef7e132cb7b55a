//! Convolutional log-mel classifier with optional attentional feature
//! fusion of the last two blocks.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{linear, meta_get, BatchEval, Classifier};
use crate::dsp::{LogMelSpectrogram, FLOOR_DB};
use crate::error::{Error, Result};
use crate::nn::{BatchNormMode, Checkpoint, BatchStats, Graph, ParamId, ParamStore, Tensor, Var};
use crate::role::NUM_ROLES;
use crate::seed;
use crate::synth::Waveform;

/// Input normalization: `(dB + offset) / scale`.
pub const INPUT_OFFSET_DB: f64 = 50.0;
pub const INPUT_SCALE_DB: f64 = 25.0;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const AFF_REDUCTION: usize = 4;
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioConfig {
    pub channels: Vec<usize>,
    pub use_aff: bool,
    pub hidden_dim: usize,
    pub n_mels: usize,
    /// Inputs are cropped or padded with silence to this many frames.
    pub max_frames: usize,
    pub dropout_p: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            channels: vec![16, 32, 64, 128],
            use_aff: false,
            hidden_dim: 128,
            n_mels: 64,
            max_frames: 1000,
            dropout_p: 0.2,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.channels.len();
        if blocks == 0 || self.channels.contains(&0) || self.hidden_dim == 0 {
            return Err(Error::Config("channels and hidden_dim must be positive".into()));
        }
        let min = 1usize << blocks;
        if self.max_frames < min.max(16) || self.n_mels < min {
            return Err(Error::Config(format!(
                "{blocks} pooling blocks need max_frames >= {} and n_mels >= {min}",
                min.max(16)
            )));
        }
        if self.use_aff && (blocks < 2 || self.channels[blocks - 1] % AFF_REDUCTION != 0) {
            return Err(Error::Config(format!(
                "feature fusion needs two or more blocks and last channels divisible by {AFF_REDUCTION}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        [
            ("domain", "audio".to_string()),
            ("channels", ch.join("/")),
            ("use_aff", self.use_aff.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("n_mels", self.n_mels.to_string()),
            ("max_frames", self.max_frames.to_string()),
            ("dropout_p", self.dropout_p.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let ch: String = meta_get(meta, "channels")?;
        let channels = ch
            .split('/')
            .map(|c| c.parse().map_err(|_| Error::Checkpoint(format!("bad channel list {ch:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        let c = AudioConfig {
            channels,
            use_aff: meta_get(meta, "use_aff")?,
            hidden_dim: meta_get(meta, "hidden_dim")?,
            n_mels: meta_get(meta, "n_mels")?,
            max_frames: meta_get(meta, "max_frames")?,
            dropout_p: meta_get(meta, "dropout_p")?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Output layer set: role classification or the waveform-class pretext task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioHead {
    Roles,
    Waveforms,
}

#[derive(Debug, Clone, Copy)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

struct BlockIds {
    conv1: ParamId,
    bn1: BnIds,
    conv2: ParamId,
    bn2: BnIds,
}

/// Bottleneck `1x1 conv -> BN -> relu -> 1x1 conv`.
struct BranchIds {
    w1: ParamId,
    b1: ParamId,
    bn: BnIds,
    w2: ParamId,
    b2: ParamId,
}

struct AffIds {
    proj: ParamId,
    proj_bn: BnIds,
    local: BranchIds,
    global: BranchIds,
}

pub struct AudioModel {
    pub config: AudioConfig,
    pub head: AudioHead,
    pub store: ParamStore,
    blocks: Vec<BlockIds>,
    aff: Option<AffIds>,
    out: Vec<(ParamId, ParamId)>,
}

type BnUpdates = Vec<(BnIds, BatchStats)>;

fn add_bn(s: &mut ParamStore, name: &str, c: usize) -> BnIds {
    BnIds {
        gamma: s.add_ones(&format!("{name}.gamma"), &[c]),
        beta: s.add_zeros(&format!("{name}.beta"), &[c]),
        mean: s.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c])),
        var: s.add_buffer(&format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
    }
}

/// Crops or pads (with the dB floor) to `max_frames`, then normalizes.
pub fn prepare_input(spec: &LogMelSpectrogram, n_mels: usize, max_frames: usize) -> Result<Vec<f64>> {
    if spec.n_mels != n_mels {
        return Err(Error::Shape { op: "audio input", lhs: vec![spec.frames(), spec.n_mels], rhs: vec![max_frames, n_mels] });
    }
    let mut out = vec![(FLOOR_DB + INPUT_OFFSET_DB) / INPUT_SCALE_DB; max_frames * n_mels];
    let keep = spec.frames().min(max_frames) * n_mels;
    for (o, &v) in out[..keep].iter_mut().zip(&spec.values.data) {
        *o = (v + INPUT_OFFSET_DB) / INPUT_SCALE_DB;
    }
    Ok(out)
}

impl AudioModel {
    /// Backbone parameters are `backbone.*`, fusion `aff.*`, role layers
    /// `head.*` and the pretext layer `aux.*`.
    pub fn new(config: AudioConfig, head: AudioHead, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let mut rng = seed::rng(seed::derive(seed, "audio-backbone-init"));
        let mut blocks = Vec::new();
        let mut c_in = 1;
        for (b, &c) in config.channels.iter().enumerate() {
            let p = format!("backbone.block{b}");
            let conv1 = s.add_uniform(&format!("{p}.conv1.w"), &[c, c_in, 3, 3], c_in * 9, &mut rng);
            let bn1 = add_bn(&mut s, &format!("{p}.bn1"), c);
            let conv2 = s.add_uniform(&format!("{p}.conv2.w"), &[c, c, 3, 3], c * 9, &mut rng);
            let bn2 = add_bn(&mut s, &format!("{p}.bn2"), c);
            blocks.push(BlockIds { conv1, bn1, conv2, bn2 });
            c_in = c;
        }
        let c_last = *config.channels.last().expect("validated");
        let aff = config.use_aff.then(|| {
            let mut rng = seed::rng(seed::derive(seed, "audio-aff-init"));
            let c_prev = config.channels[config.channels.len() - 2];
            let mid = c_last / AFF_REDUCTION;
            let mut branch = |s: &mut ParamStore, name: &str| BranchIds {
                w1: s.add_uniform(&format!("aff.{name}.conv1.w"), &[mid, c_last, 1, 1], c_last, &mut rng),
                b1: s.add_zeros(&format!("aff.{name}.conv1.b"), &[mid]),
                bn: add_bn(s, &format!("aff.{name}.bn"), mid),
                w2: s.add_uniform(&format!("aff.{name}.conv2.w"), &[c_last, mid, 1, 1], mid, &mut rng),
                b2: s.add_zeros(&format!("aff.{name}.conv2.b"), &[c_last]),
            };
            let local = branch(&mut s, "local");
            let global = branch(&mut s, "global");
            let mut rng = seed::rng(seed::derive(seed, "audio-aff-proj-init"));
            let proj = s.add_uniform("aff.proj.w", &[c_last, c_prev, 1, 1], c_prev, &mut rng);
            let proj_bn = add_bn(&mut s, "aff.proj.bn", c_last);
            AffIds { proj, proj_bn, local, global }
        });
        let mut rng = seed::rng(seed::derive(seed, "audio-head-init"));
        let mut lin = |s: &mut ParamStore, name: &str, i: usize, o: usize| {
            (s.add_uniform(&format!("{name}.w"), &[i, o], i, &mut rng), s.add_zeros(&format!("{name}.b"), &[o]))
        };
        let out = match head {
            AudioHead::Roles => vec![
                lin(&mut s, "head.fc1", c_last, config.hidden_dim),
                lin(&mut s, "head.fc2", config.hidden_dim, NUM_ROLES),
            ],
            AudioHead::Waveforms => vec![lin(&mut s, "aux.fc", c_last, Waveform::ALL.len())],
        };
        Ok(AudioModel { config, head, store: s, blocks, aff, out })
    }

    fn bn(&self, g: &mut Graph, x: Var, ids: BnIds, train: bool, updates: &mut BnUpdates) -> Result<Var> {
        let s = &self.store;
        let gamma = g.param(s, ids.gamma);
        let beta = g.param(s, ids.beta);
        if train {
            let (y, stats) = g.batch_norm(x, gamma, beta, BN_EPS, BatchNormMode::Train)?;
            updates.push((ids, stats.expect("train mode returns stats")));
            Ok(y)
        } else {
            let mode = BatchNormMode::Eval { mean: &s.get(ids.mean).value.data, var: &s.get(ids.var).value.data };
            Ok(g.batch_norm(x, gamma, beta, BN_EPS, mode)?.0)
        }
    }

    fn branch(&self, g: &mut Graph, x: Var, b: &BranchIds, train: bool, updates: &mut BnUpdates) -> Result<Var> {
        let s = &self.store;
        let (w1, b1, w2, b2) = (g.param(s, b.w1), g.param(s, b.b1), g.param(s, b.w2), g.param(s, b.b2));
        let h = g.conv2d(x, w1, Some(b1), 1)?;
        let h = self.bn(g, h, b.bn, train, updates)?;
        let h = g.relu(h);
        g.conv2d(h, w2, Some(b2), 1)
    }

    /// `w * x + (1 - w) * y` with `w = sigmoid(local(s) + global(s))`,
    /// `s = x + y`. Returns the fused map and `w`.
    pub fn aff_fuse(&self, g: &mut Graph, x: Var, y: Var, train: bool) -> Result<(Var, Var)> {
        let mut updates = Vec::new();
        self.aff_fuse_inner(g, x, y, train, &mut updates)
    }

    fn aff_fuse_inner(&self, g: &mut Graph, x: Var, y: Var, train: bool, updates: &mut BnUpdates) -> Result<(Var, Var)> {
        let aff = self.aff.as_ref().ok_or_else(|| Error::Invalid("model built without feature fusion".into()))?;
        if g.shape(x) != g.shape(y) {
            return Err(Error::Shape { op: "aff_fuse", lhs: g.shape(x).to_vec(), rhs: g.shape(y).to_vec() });
        }
        let sum = g.add(x, y)?;
        let local = self.branch(g, sum, &aff.local, train, updates)?;
        let (h, w) = (g.shape(sum)[2], g.shape(sum)[3]);
        let pooled = g.avg_pool2d(sum, (h, w), (h, w))?;
        let global = self.branch(g, pooled, &aff.global, train, updates)?;
        let logits = g.add(local, global)?;
        let weight = g.sigmoid(logits);
        Ok((g.blend(weight, x, y)?, weight))
    }

    /// Zeroes every weight and bias of both attention branches.
    pub fn zero_attention_branches(&mut self) {
        for p in self.store.iter_mut() {
            let branch = p.name.starts_with("aff.local.conv") || p.name.starts_with("aff.global.conv");
            if branch {
                p.value.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Pooled features `(N, C)` from a normalized batch `(N, 1, frames, mels)`.
    fn features(&self, g: &mut Graph, x: Var, train: bool, updates: &mut BnUpdates) -> Result<Var> {
        let s = &self.store;
        let mut h = x;
        let mut outputs = Vec::new();
        for b in &self.blocks {
            let w1 = g.param(s, b.conv1);
            h = g.conv2d(h, w1, None, 1)?;
            h = self.bn(g, h, b.bn1, train, updates)?;
            h = g.relu(h);
            let w2 = g.param(s, b.conv2);
            h = g.conv2d(h, w2, None, 1)?;
            h = self.bn(g, h, b.bn2, train, updates)?;
            h = g.relu(h);
            h = g.avg_pool2d(h, (2, 2), (2, 2))?;
            outputs.push(h);
        }
        if let Some(aff) = &self.aff {
            let prev = outputs[outputs.len() - 2];
            let p = g.avg_pool2d(prev, (2, 2), (2, 2))?;
            let wp = g.param(s, aff.proj);
            let p = g.conv2d(p, wp, None, 1)?;
            let p = self.bn(g, p, aff.proj_bn, train, updates)?;
            h = self.aff_fuse_inner(g, p, h, train, updates)?.0;
        }
        g.global_mean_max_pool(h)
    }

    fn head_logits(&self, g: &mut Graph, f: Var, train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let s = &self.store;
        match self.head {
            AudioHead::Roles => {
                let h = linear(g, s, f, self.out[0].0, self.out[0].1)?;
                let h = g.relu(h);
                let h = g.dropout(h, self.config.dropout_p, train, rng);
                linear(g, s, h, self.out[1].0, self.out[1].1)
            }
            AudioHead::Waveforms => linear(g, s, f, self.out[0].0, self.out[0].1),
        }
    }

    fn batch_input(&self, g: &mut Graph, inputs: &[&LogMelSpectrogram]) -> Result<Var> {
        let (f, m) = (self.config.max_frames, self.config.n_mels);
        let mut data = Vec::with_capacity(inputs.len() * f * m);
        for spec in inputs {
            data.extend(prepare_input(spec, m, f)?);
        }
        Ok(g.constant(Tensor::new(&[inputs.len(), 1, f, m], data)?))
    }

    /// Evaluation-mode logits for a batch, as a graph value.
    pub fn forward_eval(&self, g: &mut Graph, inputs: &[&LogMelSpectrogram]) -> Result<Var> {
        let x = self.batch_input(g, inputs)?;
        let f = self.features(g, x, false, &mut Vec::new())?;
        self.head_logits(g, f, false, &mut seed::rng(0))
    }

    /// The `backbone.*` parameters and running statistics.
    pub fn backbone_checkpoint(&self) -> Checkpoint {
        super::backbone_checkpoint(&self.store, self.config.to_meta(), "backbone.")
    }

    /// Loads a [`Self::backbone_checkpoint`]; returns the names left at
    /// their initial values.
    pub fn load_backbone(&mut self, ckpt: &Checkpoint) -> Result<Vec<String>> {
        let ours = self.config.to_meta();
        super::load_backbone(&mut self.store, ckpt, "backbone.", &ours, &["domain", "n_mels"])
    }
}

impl Classifier for AudioModel {
    type Input = LogMelSpectrogram;

    fn num_classes(&self) -> usize {
        match self.head {
            AudioHead::Roles => NUM_ROLES,
            AudioHead::Waveforms => Waveform::ALL.len(),
        }
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// One graph for the whole batch so batch norm sees batch statistics.
    fn train_batch(&mut self, batch: &[(&LogMelSpectrogram, usize)], rng: &mut ChaCha8Rng) -> Result<BatchEval> {
        let mut g = Graph::new();
        let inputs: Vec<&LogMelSpectrogram> = batch.iter().map(|(x, _)| *x).collect();
        let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
        let x = self.batch_input(&mut g, &inputs)?;
        let mut updates = Vec::new();
        let f = self.features(&mut g, x, true, &mut updates)?;
        let mut drop_rng = seed::rng(rng.gen());
        let z = self.head_logits(&mut g, f, true, &mut drop_rng)?;
        let k = self.num_classes();
        let correct = g.value(z).data.chunks(k).zip(&labels).filter(|(row, &l)| super::argmax(row) == l).count();
        let loss = g.cross_entropy(z, &labels)?;
        let loss_value = g.value(loss).item();
        g.backward(loss)?;
        g.accumulate_param_grads(&mut self.store);
        for (ids, stats) in updates {
            for (id, batch) in [(ids.mean, &stats.mean), (ids.var, &stats.var)] {
                let p = self.store.get_mut(id);
                for (r, b) in p.value.data.iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        Ok(BatchEval { loss: loss_value, correct, n: batch.len() })
    }

    fn logits(&self, inputs: &[&LogMelSpectrogram]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let z = self.forward_eval(&mut g, chunk)?;
            out.extend(g.value(z).data.chunks(self.num_classes()).map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Matrix;

    fn tiny(use_aff: bool) -> AudioConfig {
        AudioConfig { channels: vec![2, 4, 4, 8], use_aff, hidden_dim: 8, n_mels: 16, max_frames: 32, dropout_p: 0.1 }
    }

    fn spec(frames: usize, f: impl Fn(usize, usize) -> f64) -> LogMelSpectrogram {
        let mut values = Matrix::zeros(frames, 16);
        for t in 0..frames {
            for m in 0..16 {
                values.data[t * 16 + m] = f(t, m);
            }
        }
        LogMelSpectrogram { values, n_mels: 16, frame_hop_s: 0.01 }
    }

    #[test]
    fn shapes_and_silence() {
        for aff in [false, true] {
            let m = AudioModel::new(tiny(aff), AudioHead::Roles, 1).unwrap();
            let a = spec(16, |t, m| -30.0 + (t * m) as f64 % 7.0);
            let b = spec(32, |t, m| -30.0 + (t * m) as f64 % 7.0);
            let silence = spec(20, |_, _| FLOOR_DB);
            let z = m.logits(&[&a, &b, &silence]).unwrap();
            assert!(z.iter().all(|r| r.len() == 6 && r.iter().all(|v| v.is_finite())));
            assert_ne!(z[0], z[1]);
        }
    }

    #[test]
    fn chunking_does_not_change_logits() {
        let m = AudioModel::new(tiny(true), AudioHead::Roles, 2).unwrap();
        let specs: Vec<_> = (0..20).map(|k| spec(24, move |t, m| -60.0 + ((t + k) * (m + 1)) as f64 % 11.0)).collect();
        let refs: Vec<_> = specs.iter().collect();
        let all = m.logits(&refs).unwrap();
        for (i, s) in specs.iter().enumerate() {
            assert_eq!(m.logits(&[s]).unwrap()[0], all[i]);
        }
    }

    #[test]
    fn aff_identities() {
        let mut m = AudioModel::new(tiny(true), AudioHead::Roles, 3).unwrap();
        let mut rng = seed::rng(5);
        let shape = [2, 8, 2, 1];
        let xt = Tensor::uniform(&shape, 3.0, &mut rng);
        let yt = Tensor::uniform(&shape, 3.0, &mut rng);
        let mut g = Graph::new();
        let (x, y) = (g.constant(xt.clone()), g.constant(yt.clone()));
        let (_, w) = m.aff_fuse(&mut g, x, y, false).unwrap();
        assert!(g.value(w).data.iter().all(|&v| v > 0.0 && v < 1.0));
        let (same, _) = m.aff_fuse(&mut g, x, x, false).unwrap();
        assert_eq!(g.value(same).data, xt.data);

        m.zero_attention_branches();
        let mut g = Graph::new();
        let (x, y) = (g.constant(xt.clone()), g.constant(yt.clone()));
        let (out, w) = m.aff_fuse(&mut g, x, y, false).unwrap();
        assert!(g.value(w).data.iter().all(|&v| v == 0.5));
        let mean: Vec<f64> = xt.data.iter().zip(&yt.data).map(|(a, b)| (a + b) / 2.0).collect();
        assert_eq!(g.value(out).data, mean);
    }

    #[test]
    fn training_step_updates_stats_and_grads() {
        let mut m = AudioModel::new(tiny(true), AudioHead::Roles, 4).unwrap();
        let specs: Vec<_> = (0..4).map(|k| spec(32, move |t, m| -50.0 + ((t * 3 + m * k) % 13) as f64)).collect();
        let batch: Vec<_> = specs.iter().enumerate().map(|(i, s)| (s, i)).collect();
        m.train_batch(&batch, &mut seed::rng(0)).unwrap();
        let rm = m.store.get(m.store.id("backbone.block0.bn1.running_mean").unwrap());
        assert!(rm.value.data.iter().any(|&v| v != 0.0));
        let trainable: Vec<_> = m.store.iter().filter(|p| p.trainable).collect();
        let nonzero = trainable.iter().filter(|p| p.grad.iter().any(|&g| g != 0.0)).count();
        assert!(nonzero as f64 > 0.9 * trainable.len() as f64, "{nonzero}/{}", trainable.len());
    }

    #[test]
    fn config_checks() {
        assert!(AudioConfig { max_frames: 8, ..tiny(false) }.validate().is_err());
        assert!(AudioConfig { channels: vec![2, 4, 4, 6], ..tiny(true) }.validate().is_err());
        assert_eq!(AudioConfig::from_meta(&tiny(true).to_meta()).unwrap(), tiny(true));
    }
}
