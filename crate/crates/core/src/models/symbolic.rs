//! Pre-norm transformer encoder over octuple tokens with a CLS token,
//! a tanh projection and a six-way classification layer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{linear, meta_get, BatchEval, Classifier};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Graph, ParamId, ParamStore, Var};
use crate::role::NUM_ROLES;
use crate::seed;
use crate::tokenizer::{TokenSequence, TokenTuple, FIELD_VOCABS, PITCH_MASK_ID};

const FIELD_NAMES: [&str; 8] = ["bar", "position", "program", "pitch", "duration", "velocity", "tempo", "time_sig"];
const LN_EPS: f64 = 1e-5;
/// Output classes of the masked-pitch head (real pitches only).
pub(crate) const MLM_CLASSES: usize = PITCH_MASK_ID as usize;

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout_p: f64,
}

impl Default for SymbolicConfig {
    fn default() -> Self {
        SymbolicConfig { d_model: 64, n_layers: 2, n_heads: 4, ff_dim: 256, max_len: 512, dropout_p: 0.1 }
    }
}

impl SymbolicConfig {
    pub fn small() -> Self {
        Self::default()
    }

    pub fn base() -> Self {
        SymbolicConfig { n_layers: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ff_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("ff_dim and max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Trainable scalars of the classifier (encoder, projection and
    /// classification layer):
    ///
    /// ```text
    /// d * sum(field vocabs) + (max_len + 1) * d + d          embeddings, CLS
    /// + L * (2d + 4(d^2 + d) + 2d + (d*ff + ff) + (ff*d + d)) layers
    /// + 2d                                                   final norm
    /// + (d^2 + d) + (6d + 6)                                 heads
    /// ```
    pub fn param_count(&self) -> usize {
        let (d, ff) = (self.d_model, self.ff_dim);
        let vocab: usize = FIELD_VOCABS.iter().sum();
        let embed = d * vocab + (self.max_len + 1) * d + d;
        let layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d);
        embed + self.n_layers * layer + 2 * d + (d * d + d) + (NUM_ROLES * d + NUM_ROLES)
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        [
            ("domain", "symbolic".to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout_p", self.dropout_p.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let c = SymbolicConfig {
            d_model: meta_get(meta, "d_model")?,
            n_layers: meta_get(meta, "n_layers")?,
            n_heads: meta_get(meta, "n_heads")?,
            ff_dim: meta_get(meta, "ff_dim")?,
            max_len: meta_get(meta, "max_len")?,
            dropout_p: meta_get(meta, "dropout_p")?,
        };
        c.validate()?;
        Ok(c)
    }
}

struct LayerIds {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

struct Ids {
    fields: Vec<ParamId>,
    pos: ParamId,
    cls: ParamId,
    layers: Vec<LayerIds>,
    ln_f: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    out: (ParamId, ParamId),
    mlm: Option<(ParamId, ParamId)>,
}

pub struct SymbolicModel {
    pub config: SymbolicConfig,
    pub store: ParamStore,
    ids: Ids,
}

impl SymbolicModel {
    /// Encoder parameters are named `enc.*`, the projection and
    /// classification layers `head.*`.
    pub fn new(config: SymbolicConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, "symbolic-init"));
        let mut s = ParamStore::new();
        let (d, ff) = (config.d_model, config.ff_dim);
        let fields = FIELD_NAMES
            .iter()
            .zip(FIELD_VOCABS)
            .map(|(name, vocab)| s.add_uniform(&format!("enc.embed.{name}"), &[vocab, d], d, &mut rng))
            .collect();
        let pos = s.add_uniform("enc.embed.position_index", &[config.max_len + 1, d], d, &mut rng);
        let cls = s.add_uniform("enc.cls", &[1, d], d, &mut rng);
        let norm = |s: &mut ParamStore, name: &str| {
            (s.add_ones(&format!("{name}.gamma"), &[d]), s.add_zeros(&format!("{name}.beta"), &[d]))
        };
        let lin = |s: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
            (s.add_uniform(&format!("{name}.w"), &[i, o], i, rng), s.add_zeros(&format!("{name}.b"), &[o]))
        };
        let mut layers = Vec::new();
        for l in 0..config.n_layers {
            let p = format!("enc.layer{l}");
            layers.push(LayerIds {
                ln1: norm(&mut s, &format!("{p}.ln1")),
                q: lin(&mut s, &mut rng, &format!("{p}.attn.q"), d, d),
                k: lin(&mut s, &mut rng, &format!("{p}.attn.k"), d, d),
                v: lin(&mut s, &mut rng, &format!("{p}.attn.v"), d, d),
                o: lin(&mut s, &mut rng, &format!("{p}.attn.o"), d, d),
                ln2: norm(&mut s, &format!("{p}.ln2")),
                ff1: lin(&mut s, &mut rng, &format!("{p}.ff1"), d, ff),
                ff2: lin(&mut s, &mut rng, &format!("{p}.ff2"), ff, d),
            });
        }
        let ln_f = norm(&mut s, "enc.ln_f");
        let mut head_rng = seed::rng(seed::derive(seed, "symbolic-head-init"));
        let proj = lin(&mut s, &mut head_rng, "head.proj", d, d);
        let out = lin(&mut s, &mut head_rng, "head.cls", d, NUM_ROLES);
        let ids = Ids { fields, pos, cls, layers, ln_f, proj, out, mlm: None };
        Ok(SymbolicModel { config, store: s, ids })
    }

    /// Adds the masked-pitch head `mlm.*` used only during pretraining.
    pub fn add_mlm_head(&mut self, seed: u64) {
        if self.ids.mlm.is_some() {
            return;
        }
        let d = self.config.d_model;
        let mut rng = seed::rng(seed::derive(seed, "mlm-init"));
        let w = self.store.add_uniform("mlm.w", &[d, MLM_CLASSES], d, &mut rng);
        let b = self.store.add_zeros("mlm.b", &[MLM_CLASSES]);
        self.ids.mlm = Some((w, b));
    }

    /// Final hidden states `(1 + T, d)`, CLS first; tokens past `max_len`
    /// are ignored.
    pub(crate) fn encode(&self, g: &mut Graph, tokens: &[TokenTuple], train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let c = &self.config;
        let s = &self.store;
        let toks = &tokens[..tokens.len().min(c.max_len)];
        let t = toks.len();
        let cls = g.param(s, self.ids.cls);
        let mut h = if t == 0 {
            cls
        } else {
            let mut x: Option<Var> = None;
            for (f, &id) in self.ids.fields.iter().enumerate() {
                let ids: Vec<usize> = toks.iter().map(|tk| tk.fields()[f]).collect();
                let table = g.param(s, id);
                let e = g.embedding_lookup(table, &ids)?;
                x = Some(match x {
                    Some(acc) => g.add(acc, e)?,
                    None => e,
                });
            }
            g.concat(&[cls, x.expect("eight fields")], 0)?
        };
        let pos_table = g.param(s, self.ids.pos);
        let positions: Vec<usize> = (0..=t).collect();
        let pos = g.embedding_lookup(pos_table, &positions)?;
        h = g.add(h, pos)?;
        h = g.dropout(h, c.dropout_p, train, rng);
        let dh = c.d_model / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in &self.ids.layers {
            let x = self.norm(g, h, l.ln1)?;
            let q = linear(g, s, x, l.q.0, l.q.1)?;
            let k = linear(g, s, x, l.k.0, l.k.1)?;
            let v = linear(g, s, x, l.v.0, l.v.1)?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for hd in 0..c.n_heads {
                let qh = g.slice(q, 1, hd * dh, dh)?;
                let kh = g.slice(k, 1, hd * dh, dh)?;
                let vh = g.slice(v, 1, hd * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let p = g.softmax(scores, 1)?;
                heads.push(g.matmul(p, vh)?);
            }
            let cat = g.concat(&heads, 1)?;
            let a = linear(g, s, cat, l.o.0, l.o.1)?;
            let a = g.dropout(a, c.dropout_p, train, rng);
            h = g.add(h, a)?;
            let x = self.norm(g, h, l.ln2)?;
            let f = linear(g, s, x, l.ff1.0, l.ff1.1)?;
            let f = g.gelu(f);
            let f = linear(g, s, f, l.ff2.0, l.ff2.1)?;
            let f = g.dropout(f, c.dropout_p, train, rng);
            h = g.add(h, f)?;
        }
        self.norm(g, h, self.ids.ln_f)
    }

    fn norm(&self, g: &mut Graph, x: Var, (gamma, beta): (ParamId, ParamId)) -> Result<Var> {
        let gv = g.param(&self.store, gamma);
        let bv = g.param(&self.store, beta);
        g.layer_norm(x, gv, bv, LN_EPS)
    }

    /// Six logits `(1, 6)` from the CLS state.
    pub(crate) fn classify(&self, g: &mut Graph, hidden: Var, train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let cls = g.slice(hidden, 0, 0, 1)?;
        let p = linear(g, &self.store, cls, self.ids.proj.0, self.ids.proj.1)?;
        let p = g.tanh(p);
        let p = g.dropout(p, self.config.dropout_p, train, rng);
        linear(g, &self.store, p, self.ids.out.0, self.ids.out.1)
    }

    /// Masked-pitch logits for the given token positions.
    pub(crate) fn mlm_logits(&self, g: &mut Graph, hidden: Var, positions: &[usize]) -> Result<Var> {
        let (w, b) = self.ids.mlm.ok_or_else(|| Error::Invalid("model has no masked-pitch head".into()))?;
        let rows: Vec<usize> = positions.iter().map(|p| p + 1).collect();
        let x = g.embedding_lookup(hidden, &rows)?;
        linear(g, &self.store, x, w, b)
    }

    pub fn forward_logits(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut rng = seed::rng(0);
        let h = self.encode(&mut g, &tokens.tuples, false, &mut rng)?;
        let z = self.classify(&mut g, h, false, &mut rng)?;
        Ok(g.value(z).data.clone())
    }

    /// The `enc.*` parameters, for fine-tuning a fresh classifier.
    pub fn backbone_checkpoint(&self) -> Checkpoint {
        super::backbone_checkpoint(&self.store, self.config.to_meta(), "enc.")
    }

    /// Loads a [`Self::backbone_checkpoint`]; returns the names left at
    /// their initial values.
    pub fn load_backbone(&mut self, ckpt: &Checkpoint) -> Result<Vec<String>> {
        let ours = self.config.to_meta();
        super::load_backbone(&mut self.store, ckpt, "enc.", &ours, &["domain", "n_heads"])
    }
}

impl Classifier for SymbolicModel {
    type Input = TokenSequence;

    fn num_classes(&self) -> usize {
        NUM_ROLES
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// One graph per example; gradients are summed in batch order.
    fn train_batch(&mut self, batch: &[(&TokenSequence, usize)], rng: &mut ChaCha8Rng) -> Result<BatchEval> {
        let n = batch.len();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for &(tokens, label) in batch {
            let mut drop_rng = seed::rng(rng.gen());
            let mut g = Graph::new();
            let h = self.encode(&mut g, &tokens.tuples, true, &mut drop_rng)?;
            let z = self.classify(&mut g, h, true, &mut drop_rng)?;
            if super::argmax(&g.value(z).data) == label {
                correct += 1;
            }
            let l = g.cross_entropy(z, &[label])?;
            let l = g.scale(l, 1.0 / n as f64);
            loss_sum += g.value(l).item();
            g.backward(l)?;
            g.accumulate_param_grads(&mut self.store);
        }
        Ok(BatchEval { loss: loss_sum, correct, n })
    }

    fn logits(&self, inputs: &[&TokenSequence]) -> Result<Vec<Vec<f64>>> {
        inputs.iter().map(|t| self.forward_logits(t)).collect()
    }
}
