//! Confusion matrices, IoU and the class-distribution shift report.

use std::fmt::Write as _;

use crate::cloud::ClassStats;
use crate::error::{Error, Result};

/// `c x c` counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::arg("confusion matrix must be square"));
        }
        Ok(Self {
            num_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize, n: u64) {
        self.counts[truth * self.num_classes + pred] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::arg("class count mismatch"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Ground-truth count of each class (row sums).
    pub fn truth_counts(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|t| (0..self.num_classes).map(|p| self.get(t, p)).sum())
            .collect()
    }

    pub fn pred_counts(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|p| (0..self.num_classes).map(|t| self.get(t, p)).sum())
            .collect()
    }
}

/// Tallies predictions against ground truth.
pub fn confusion(pred: &[u32], truth: &[u32], num_classes: usize) -> Result<ConfusionMatrix> {
    confusion_masked(pred, truth, None, num_classes)
}

/// Like [`confusion`], counting only points whose mask entry is set.
pub fn confusion_masked(pred: &[u32], truth: &[u32], mask: Option<&[bool]>, num_classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != truth.len()) {
        return Err(Error::arg(format!(
            "{} predictions but {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (j, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if mask.is_some_and(|m| !m[j]) {
            continue;
        }
        if p as usize >= num_classes || t as usize >= num_classes {
            return Err(Error::Data {
                ordinal: j,
                message: format!("label outside 0..{num_classes}"),
            });
        }
        cm.add(t as usize, p as usize, 1);
    }
    Ok(cm)
}

/// `TP / (TP + FP + FN)` per class; `None` when the class is absent from
/// both prediction and truth.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let truth = cm.truth_counts();
    let pred = cm.pred_counts();
    (0..cm.num_classes)
        .map(|k| {
            let tp = cm.get(k, k);
            let union = truth[k] + pred[k] - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect()
}

/// Mean IoU over defined classes, optionally skipping one class id.
/// `None` when no class is defined.
pub fn miou_excluding(cm: &ConfusionMatrix, ignore: Option<usize>) -> Option<f64> {
    let ious: Vec<f64> = iou_per_class(cm)
        .into_iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != ignore)
        .filter_map(|(_, v)| v)
        .collect();
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn miou(cm: &ConfusionMatrix) -> Option<f64> {
    miou_excluding(cm, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftRow {
    pub class: usize,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
    /// `delta / before`; `None` when the class was absent before.
    pub relative: Option<f64>,
}

/// Per-class frequency change, sorted by descending frequency before
/// (ties by class id).
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftReport {
    pub rows: Vec<ShiftRow>,
}

pub fn distribution_shift_report(before: &ClassStats, after: &ClassStats) -> Result<ShiftReport> {
    if before.num_classes != after.num_classes {
        return Err(Error::arg("class count mismatch"));
    }
    let mut rows: Vec<ShiftRow> = (0..before.num_classes)
        .map(|k| {
            let (b, a) = (before.frequencies[k], after.frequencies[k]);
            let delta = a - b;
            ShiftRow {
                class: k,
                before: b,
                after: a,
                delta,
                relative: (b > 0.0).then(|| delta / b),
            }
        })
        .collect();
    rows.sort_by(|x, y| y.before.total_cmp(&x.before).then(x.class.cmp(&y.class)));
    Ok(ShiftReport { rows })
}

const SHIFT_HEADER: &str = "class,before,after,delta,relative_delta";

impl ShiftReport {
    pub fn row(&self, class: usize) -> Option<&ShiftRow> {
        self.rows.iter().find(|r| r.class == class)
    }

    /// CSV with full-precision floats (`{:?}` formatting round-trips exactly).
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SHIFT_HEADER}\n");
        for r in &self.rows {
            let rel = r.relative.map_or("nan".to_string(), |v| format!("{v:?}"));
            let _ = writeln!(out, "{},{:?},{:?},{:?},{}", r.class, r.before, r.after, r.delta, rel);
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|l| l.1) != Some(SHIFT_HEADER) {
            return Err(Error::arg("missing shift report header"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let bad = || Error::Data {
                ordinal: i,
                message: format!("malformed row {line:?}"),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            rows.push(ShiftRow {
                class: f[0].parse().map_err(|_| bad())?,
                before: num(f[1])?,
                after: num(f[2])?,
                delta: num(f[3])?,
                relative: if f[4] == "nan" { None } else { Some(num(f[4])?) },
            });
        }
        Ok(Self { rows })
    }
}
