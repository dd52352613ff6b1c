//! Confusion matrices, unweighted metrics, and leave-one-subject-out folds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(c: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Element-wise sum with another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::dim("merge", &[self.classes()], &[other.classes()]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// One comma-separated line per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.counts {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], c: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::dim("confusion", &[preds.len()], &[labels.len()]));
    }
    let mut cm = ConfusionMatrix::zeros(c);
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= c || t >= c {
            return Err(Error::contract(format!(
                "class index out of range for {c} classes: pred {p}, label {t}"
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cm: ConfusionMatrix,
    pub uf1: f64,
    pub uar: f64,
    pub acc: f64,
    pub per_class: Vec<ClassMetrics>,
    pub fold_id: Option<String>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 with unweighted means; any zero
/// denominator contributes 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::contract(
            "cannot compute metrics on an empty confusion matrix",
        ));
    }
    let c = cm.classes();
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.counts[k][k];
        let row: u64 = cm.counts[k].iter().sum();
        let col: u64 = cm.counts.iter().map(|r| r[k]).sum();
        let precision = ratio(tp, col);
        let recall = ratio(tp, row);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
        });
    }
    let uf1 = per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64;
    let uar = per_class.iter().map(|m| m.recall).sum::<f64>() / c as f64;
    Ok(EvalReport {
        cm: cm.clone(),
        uf1,
        uar,
        acc: cm.trace() as f64 / total as f64,
        per_class,
        fold_id: None,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test_subject: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct subject, in sorted subject order.
pub fn loso_folds(subject_ids: &[String]) -> Vec<Fold> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in subject_ids.iter().enumerate() {
        by_subject.entry(s.as_str()).or_default().push(i);
    }
    by_subject
        .into_iter()
        .map(|(s, test)| Fold {
            test_subject: s.to_string(),
            train: (0..subject_ids.len())
                .filter(|&i| subject_ids[i] != s)
                .collect(),
            test,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// One confusion matrix over all folds' predictions.
    #[default]
    Pooled,
    /// Mean of per-fold metrics.
    Averaged,
}

/// Combines per-fold matrices into a single report.
pub fn aggregate(folds: &[ConfusionMatrix], mode: Aggregation) -> Result<EvalReport> {
    let Some(first) = folds.first() else {
        return Err(Error::contract("no folds to aggregate"));
    };
    let mut pooled = ConfusionMatrix::zeros(first.classes());
    for cm in folds {
        pooled.merge(cm)?;
    }
    let mut report = compute_metrics(&pooled)?;
    if mode == Aggregation::Averaged {
        let reports = folds
            .iter()
            .filter(|cm| cm.total() > 0)
            .map(compute_metrics)
            .collect::<Result<Vec<_>>>()?;
        let n = reports.len() as f64;
        report.uf1 = reports.iter().map(|r| r.uf1).sum::<f64>() / n;
        report.uar = reports.iter().map(|r| r.uar).sum::<f64>() / n;
        report.acc = reports.iter().map(|r| r.acc).sum::<f64>() / n;
    }
    Ok(report)
}
