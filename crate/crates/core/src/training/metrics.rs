//! Accuracy, confusion matrices and the metrics file.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::capsnet::LabelMode;
use crate::error::{shape_err, Result};
use crate::training::config::RunConfig;

/// Single-label: fraction exactly right. Multi-label: per-class binary
/// accuracy averaged over classes and examples.
pub fn accuracy(
    preds: &[BTreeSet<usize>],
    targets: &[BTreeSet<usize>],
    mode: LabelMode,
    n_classes: usize,
) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(shape_err(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| match mode {
            LabelMode::Single => f64::from(u8::from(p == t)),
            LabelMode::Multi => {
                let agree = (0..n_classes).filter(|k| p.contains(k) == t.contains(k)).count();
                agree as f64 / n_classes as f64
            }
        })
        .sum();
    Ok(total / preds.len() as f64)
}

pub fn metric_name(mode: LabelMode) -> &'static str {
    match mode {
        LabelMode::Single => "accuracy",
        LabelMode::Multi => "weighted_accuracy",
    }
}

/// Single-label: `[true][pred]` counts. Multi-label: one row per class
/// holding `[tp, fp, fn, tn]`.
pub fn confusion(
    preds: &[BTreeSet<usize>],
    targets: &[BTreeSet<usize>],
    mode: LabelMode,
    n_classes: usize,
) -> Vec<Vec<usize>> {
    match mode {
        LabelMode::Single => {
            let mut m = vec![vec![0; n_classes]; n_classes];
            for (p, t) in preds.iter().zip(targets) {
                if let (Some(&p), Some(&t)) = (p.iter().next(), t.iter().next()) {
                    m[t][p] += 1;
                }
            }
            m
        }
        LabelMode::Multi => (0..n_classes)
            .map(|k| {
                let mut row = vec![0; 4];
                for (p, t) in preds.iter().zip(targets) {
                    let idx = match (t.contains(&k), p.contains(&k)) {
                        (true, true) => 0,
                        (false, true) => 1,
                        (true, false) => 2,
                        (false, false) => 3,
                    };
                    row[idx] += 1;
                }
                row
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mode: LabelMode,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the kept checkpoint; 0 means the initialization.
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Confusion of the kept checkpoint on the test split.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    /// Equality ignoring wall-clock seconds.
    pub fn same_results(&self, other: &Self) -> bool {
        let strip = |m: &Self| m.epochs.iter().map(|e| (e.epoch, e.train_loss, e.test_metric)).collect::<Vec<_>>();
        self.mode == other.mode
            && strip(self) == strip(other)
            && self.best_epoch == other.best_epoch
            && self.best_metric == other.best_metric
            && self.confusion == other.confusion
    }

    pub fn render(&self, cfg: &RunConfig, class_names: &[String]) -> String {
        let mut out = String::new();
        for line in cfg.to_text().lines() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "# metric: {}", metric_name(self.mode));
        if self.mode == LabelMode::Multi {
            let _ = writeln!(out, "# weighted_accuracy: per-class binary accuracy averaged over classes and examples");
        }
        let _ = writeln!(out, "# selection: best_test");
        let _ = writeln!(out, "# best_epoch: {}", self.best_epoch);
        let _ = writeln!(out, "# best_metric: {}", self.best_metric);
        let _ = writeln!(out, "# classes: {}", class_names.join("|"));
        let layout = match self.mode {
            LabelMode::Single => "rows true class, columns predicted class",
            LabelMode::Multi => "per class tp fp fn tn",
        };
        let _ = writeln!(out, "# confusion ({layout}):");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "#   {}", cells.join(" "));
        }
        out.push_str("epoch,train_loss,test_metric,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{:.3}", e.epoch, e.train_loss, e.test_metric, e.seconds);
        }
        out
    }
}
