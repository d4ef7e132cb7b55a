//! Labeled corpora: balancing, stratified splits, augmentation and the
//! rule-based synthetic generator.

mod augment;
mod synthetic;

pub use augment::{augment_set, scale_tempo, transpose, AugmentPolicy};
pub use synthetic::{synthesize_corpus, synthesize_example, write_corpus, SYNTH_PPQ};

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::midi::{LabeledSet, Sequence};
use crate::role::{TrackRole, NUM_ROLES};
use crate::seed;

pub const TEST_FRACTION: f64 = 0.2;
pub const VAL_FRACTION: f64 = 0.1;
pub const MIN_PER_CLASS_FOR_SPLIT: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum Origin {
    Ingested,
    Synthetic,
    Augmented { parent_id: String, transform: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub sequence: Sequence,
    pub role: TrackRole,
    pub origin: Origin,
}

impl LabeledExample {
    pub fn is_augmented(&self) -> bool {
        matches!(self.origin, Origin::Augmented { .. })
    }
}

/// Ingested files as examples; the id is the file name without a `.mid`
/// or `.midi` extension.
pub fn from_labeled_set(set: LabeledSet) -> Vec<LabeledExample> {
    set.examples
        .into_iter()
        .map(|(file, sequence, role)| {
            let id = file.strip_suffix(".mid").or_else(|| file.strip_suffix(".midi")).unwrap_or(&file).to_string();
            LabeledExample { id, sequence, role, origin: Origin::Ingested }
        })
        .collect()
}

pub fn class_counts(examples: &[LabeledExample]) -> [usize; NUM_ROLES] {
    let mut c = [0; NUM_ROLES];
    for e in examples {
        c[e.role.index()] += 1;
    }
    c
}

fn by_class(examples: &[LabeledExample]) -> [Vec<usize>; NUM_ROLES] {
    let mut groups: [Vec<usize>; NUM_ROLES] = Default::default();
    for (i, e) in examples.iter().enumerate() {
        groups[e.role.index()].push(i);
    }
    groups
}

/// Seeded uniform selection of `per_class` examples of each role (default:
/// the smallest class size). Output is grouped by role in canonical order.
pub fn balance(examples: &[LabeledExample], per_class: Option<usize>, seed: u64) -> Result<Vec<LabeledExample>> {
    let groups = by_class(examples);
    if let Some(r) = TrackRole::ALL.iter().find(|r| groups[r.index()].is_empty()) {
        return Err(Error::Dataset(format!("role {r} has no examples")));
    }
    let min = groups.iter().map(Vec::len).min().unwrap_or(0);
    let k = per_class.unwrap_or(min);
    if k > min {
        let r = TrackRole::ALL[groups.iter().position(|g| g.len() == min).unwrap()];
        return Err(Error::Dataset(format!("per_class {k} exceeds the {min} examples of role {r}")));
    }
    let mut out = Vec::with_capacity(k * NUM_ROLES);
    for role in TrackRole::ALL {
        let mut idx = groups[role.index()].clone();
        idx.shuffle(&mut seed::rng(seed::derive(seed, &format!("balance/{role}"))));
        out.extend(idx[..k].iter().map(|&i| examples[i].clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Dataset(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Splits `total` items into per-class integer counts proportional to
/// `quotas`: floors first, then one extra to the largest remainders, ties
/// to the lower class index.
fn largest_remainder(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest = total.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[c] += 1;
        rest -= 1;
    }
    counts
}

/// Stratified shuffled split. The test set is `floor(0.2 N)` examples and
/// the validation set `floor(0.1 * (N - test))`, each spread over the
/// classes by largest remainder.
pub fn split(examples: &[LabeledExample], seed: u64) -> Result<SplitManifest> {
    if let Some(e) = examples.iter().find(|e| e.is_augmented()) {
        return Err(Error::Dataset(format!("augmented example {} cannot be split; augment the train split only", e.id)));
    }
    let mut seen = HashSet::new();
    if let Some(e) = examples.iter().find(|e| !seen.insert(e.id.as_str())) {
        return Err(Error::Dataset(format!("duplicate example id {}", e.id)));
    }
    let groups = by_class(examples);
    for role in TrackRole::ALL {
        let n = groups[role.index()].len();
        if n < MIN_PER_CLASS_FOR_SPLIT {
            return Err(Error::Dataset(format!(
                "role {role} has {n} examples; stratified split needs at least {MIN_PER_CLASS_FOR_SPLIT}"
            )));
        }
    }
    let n = examples.len();
    let sizes: Vec<f64> = groups.iter().map(|g| g.len() as f64).collect();
    let test_total = (TEST_FRACTION * n as f64).floor() as usize;
    let test = largest_remainder(&sizes.iter().map(|s| s * TEST_FRACTION).collect::<Vec<_>>(), test_total);
    let pool: Vec<f64> = sizes.iter().zip(&test).map(|(s, &t)| s - t as f64).collect();
    let val_total = (VAL_FRACTION * pool.iter().sum::<f64>()).floor() as usize;
    let val = largest_remainder(&pool.iter().map(|p| p * VAL_FRACTION).collect::<Vec<_>>(), val_total);

    let mut m = SplitManifest { seed, train_ids: Vec::new(), val_ids: Vec::new(), test_ids: Vec::new() };
    for role in TrackRole::ALL {
        let c = role.index();
        let mut idx = groups[c].clone();
        idx.shuffle(&mut seed::rng(seed::derive(seed, &format!("split/{role}"))));
        let ids = idx.iter().map(|&i| examples[i].id.clone());
        let (t, v) = (test[c], val[c]);
        for (k, id) in ids.enumerate() {
            match k {
                k if k < t => m.test_ids.push(id),
                k if k < t + v => m.val_ids.push(id),
                _ => m.train_ids.push(id),
            }
        }
    }
    Ok(m)
}

impl SplitManifest {
    pub fn split_of(&self, id: &str) -> Option<Split> {
        if self.train_ids.iter().any(|x| x == id) {
            Some(Split::Train)
        } else if self.val_ids.iter().any(|x| x == id) {
            Some(Split::Val)
        } else if self.test_ids.iter().any(|x| x == id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train_ids,
            Split::Val => &self.val_ids,
            Split::Test => &self.test_ids,
        }
    }

    /// Examples of one split, in manifest order.
    pub fn select(&self, examples: &[LabeledExample], split: Split) -> Result<Vec<LabeledExample>> {
        let index: std::collections::HashMap<&str, &LabeledExample> =
            examples.iter().map(|e| (e.id.as_str(), e)).collect();
        self.ids(split)
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|e| (*e).clone())
                    .ok_or_else(|| Error::Dataset(format!("split lists unknown example {id}")))
            })
            .collect()
    }

    /// Header comment lines, then one `id<TAB>split` line per example.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# seed={}\n# train={} val={} test={}\n",
            self.seed,
            self.train_ids.len(),
            self.val_ids.len(),
            self.test_ids.len()
        );
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in self.ids(split) {
                s.push_str(&format!("{id}\t{split}\n"));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = SplitManifest { seed: 0, train_ids: Vec::new(), val_ids: Vec::new(), test_ids: Vec::new() };
        for (i, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# seed=") {
                m.seed = rest.trim().parse().map_err(|_| Error::Dataset(format!("line {}: bad seed", i + 1)))?;
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (id, split) = line
                .split_once('\t')
                .ok_or_else(|| Error::Dataset(format!("line {}: expected id<TAB>split", i + 1)))?;
            match split.parse::<Split>()? {
                Split::Train => m.train_ids.push(id.to_string()),
                Split::Val => m.val_ids.push(id.to_string()),
                Split::Test => m.test_ids.push(id.to_string()),
            }
        }
        Ok(m)
    }
}
