//! Confusion matrices, support-weighted metrics and report files.

mod svg;

pub use svg::render_confusion_svg;

use crate::error::{Error, Result};
use crate::role::{TrackRole, NUM_ROLES};

/// Rows are true roles, columns predicted roles, both in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_ROLES]; NUM_ROLES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_ROLES).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Per-class support (true-class histogram).
    pub fn row_sums(&self) -> [u64; NUM_ROLES] {
        self.counts.map(|r| r.iter().sum())
    }

    pub fn col_sums(&self) -> [u64; NUM_ROLES] {
        let mut c = [0; NUM_ROLES];
        for row in &self.counts {
            for (s, v) in c.iter_mut().zip(row) {
                *s += v;
            }
        }
        c
    }

    /// Each row divided by its sum; rows without support stay zero.
    pub fn row_normalized(&self) -> [[f64; NUM_ROLES]; NUM_ROLES] {
        let sums = self.row_sums();
        let mut out = [[0.0; NUM_ROLES]; NUM_ROLES];
        for (i, row) in self.counts.iter().enumerate() {
            if sums[i] > 0 {
                for (o, &c) in out[i].iter_mut().zip(row) {
                    *o = c as f64 / sums[i] as f64;
                }
            }
        }
        out
    }

    /// Tab-separated counts with a header naming the axis order.
    pub fn to_tsv(&self) -> String {
        let labels: Vec<&str> = TrackRole::ALL.iter().map(|r| r.abbrev()).collect();
        let mut s = format!("true\\pred\t{}\n", labels.join("\t"));
        for (r, row) in TrackRole::ALL.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!("{}\t{}\n", r.abbrev(), cells.join("\t")));
        }
        s
    }
}

pub fn confusion(y_true: &[TrackRole], y_pred: &[TrackRole]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Invalid(format!(
            "confusion: {} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Invalid("confusion: no examples".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (t, p) in y_true.iter().zip(y_pred) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Support-weighted averages over the six classes.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: [ClassMetrics; NUM_ROLES],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Invalid("metrics: empty confusion matrix".into()));
    }
    let (rows, cols) = (cm.row_sums(), cm.col_sums());
    let mut per_class = [ClassMetrics::default(); NUM_ROLES];
    for (i, m) in per_class.iter_mut().enumerate() {
        let d = cm.counts[i][i];
        let (p, r) = (ratio(d, cols[i]), ratio(d, rows[i]));
        *m = ClassMetrics { precision: p, recall: r, f1: harmonic(p, r), support: rows[i] };
    }
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
    };
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_ROLES as f64;
    Ok(MetricsReport {
        accuracy: cm.accuracy(),
        precision: weighted(|m| m.precision),
        recall: weighted(|m| m.recall),
        f1: weighted(|m| m.f1),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
    })
}

pub const METRICS_HEADER: &str = "model,mode,accuracy,precision,recall,f1";

impl MetricsReport {
    /// One `model,mode,accuracy,precision,recall,f1` row, six decimals.
    pub fn csv_row(&self, model: &str, mode: &str) -> String {
        format!(
            "{model},{mode},{:.6},{:.6},{:.6},{:.6}",
            self.accuracy, self.precision, self.recall, self.f1
        )
    }

    /// Header plus one row.
    pub fn to_csv(&self, model: &str, mode: &str) -> String {
        format!("{METRICS_HEADER}\n{}\n", self.csv_row(model, mode))
    }

    /// Per-class detail with weighted and macro summary rows.
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("role,precision,recall,f1,support\n");
        for (r, m) in TrackRole::ALL.iter().zip(&self.per_class) {
            s.push_str(&format!("{r},{:.6},{:.6},{:.6},{}\n", m.precision, m.recall, m.f1, m.support));
        }
        let total: u64 = self.per_class.iter().map(|m| m.support).sum();
        s.push_str(&format!("weighted,{:.6},{:.6},{:.6},{total}\n", self.precision, self.recall, self.f1));
        s.push_str(&format!(
            "macro,{:.6},{:.6},{:.6},{total}\n",
            self.macro_precision, self.macro_recall, self.macro_f1
        ));
        s
    }
}
