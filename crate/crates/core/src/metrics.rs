//! Evaluation metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    Acc,
    Mcc,
    Pcc,
}

impl MetricKind {
    /// Accuracy for classification and tagging, Pearson for regression.
    pub fn default_for(task: TaskKind) -> Self {
        match task {
            TaskKind::Classify | TaskKind::Tag => MetricKind::Acc,
            TaskKind::Regress => MetricKind::Pcc,
        }
    }

    pub fn fits(self, task: TaskKind) -> bool {
        matches!(
            (self, task),
            (MetricKind::Acc, TaskKind::Classify | TaskKind::Tag)
                | (MetricKind::Mcc, TaskKind::Classify)
                | (MetricKind::Pcc, TaskKind::Regress)
        )
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Acc => "Acc",
            MetricKind::Mcc => "Mcc",
            MetricKind::Pcc => "Pcc",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "acc" => Ok(MetricKind::Acc),
            "mcc" => Ok(MetricKind::Mcc),
            "pcc" => Ok(MetricKind::Pcc),
            other => Err(Error::config(format!("unknown metric '{other}'"))),
        }
    }
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / gold.len() as f64
}

/// Binary confusion counts with class 1 as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_predictions(pred: &[usize], gold: &[usize]) -> Self {
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gold) {
            match (p == 1, g == 1) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, tn, fp, fn_) = (self.tp as f64, self.tn as f64, self.fp as f64, self.fn_ as f64);
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / denom.sqrt()
        }
    }
}

pub fn mcc(pred: &[usize], gold: &[usize]) -> f64 {
    Confusion::from_predictions(pred, gold).mcc()
}

/// Sample Pearson correlation. Returns `(0.0, true)` when either side is
/// constant; the flag marks the value as undefined.
pub fn pearson(x: &[f64], y: &[f64]) -> (f64, bool) {
    let n = x.len().min(y.len());
    if n < 2 {
        return (0.0, true);
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return (0.0, true);
    }
    (sxy / (sxx * syy).sqrt(), false)
}
