//! Regression and classification scores, pooled over tasks or per task.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {truth} targets vs {predicted} predictions")]
    Length { truth: usize, predicted: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("Q² is undefined for an all-zero target vector")]
    ZeroTargets,
    #[error("correlation is undefined: {0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("label {0} is not -1 or +1")]
    Label(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub rmse: f64,
    pub q2: f64,
    pub correlation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn check_len(y: &[f64], yhat: &[f64], needed: usize) -> Result<(), MetricsError> {
    if y.len() != yhat.len() {
        return Err(MetricsError::Length {
            truth: y.len(),
            predicted: yhat.len(),
        });
    }
    if y.len() < needed {
        return Err(MetricsError::TooFew { needed, got: y.len() });
    }
    Ok(())
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check_len(y, yhat, 1)?;
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// `1 - ||y - ŷ||² / ||y||²`.
pub fn q2(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check_len(y, yhat, 1)?;
    let norm: f64 = y.iter().map(|v| v * v).sum();
    if norm == 0.0 {
        return Err(MetricsError::ZeroTargets);
    }
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - sse / norm)
}

/// Pearson correlation.
pub fn correlation(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check_len(y, yhat, 2)?;
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mp = yhat.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        let (da, db) = (a - my, b - mp);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("target"));
    }
    if syy == 0.0 {
        return Err(MetricsError::ZeroVariance("prediction"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn regression_report(y: &[f64], yhat: &[f64]) -> Result<RegressionReport, MetricsError> {
    check_len(y, yhat, 2)?;
    Ok(RegressionReport {
        rmse: rmse(y, yhat)?,
        q2: q2(y, yhat)?,
        correlation: correlation(y, yhat)?,
    })
}

/// Confusion-matrix scores with `+1` as the positive class. Precision and
/// recall are 1 when their denominator is empty.
pub fn classification_report(y: &[f64], yhat: &[f64]) -> Result<ClassificationReport, MetricsError> {
    check_len(y, yhat, 1)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&a, &b) in y.iter().zip(yhat) {
        for v in [a, b] {
            if v != 1.0 && v != -1.0 {
                return Err(MetricsError::Label(v));
            }
        }
        match (a > 0.0, b > 0.0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize, what: &str| {
        if den == 0 {
            log::warn!("{what} has an empty denominator; reporting 1");
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp, "precision");
    let recall = ratio(tp, tp + fn_, "recall");
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClassificationReport {
        accuracy: (tp + tn) as f64 / y.len() as f64,
        precision,
        recall,
        f1,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Either kind of report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Report {
    Regression(RegressionReport),
    Classification(ClassificationReport),
}

impl Report {
    /// `(name, value)` pairs in a fixed order.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        match self {
            Report::Regression(r) => vec![("rmse", r.rmse), ("q2", r.q2), ("correlation", r.correlation)],
            Report::Classification(c) => vec![
                ("accuracy", c.accuracy),
                ("precision", c.precision),
                ("recall", c.recall),
                ("f1", c.f1),
                ("tp", c.tp as f64),
                ("fp", c.fp as f64),
                ("tn", c.tn as f64),
                ("fn", c.fn_ as f64),
            ],
        }
    }

    /// `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }
}

/// Pooled report plus one report per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pooled: Report,
    /// `None` where a task's report is undefined (e.g. too few samples).
    pub per_task: Vec<Option<Report>>,
}

/// Scores predictions grouped by task.
pub fn evaluate(truth: &[Vec<f64>], predicted: &[Vec<f64>], classification: bool) -> Result<EvalReport, MetricsError> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::Length {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    let score = |y: &[f64], p: &[f64]| -> Result<Report, MetricsError> {
        if classification {
            classification_report(y, p).map(Report::Classification)
        } else {
            regression_report(y, p).map(Report::Regression)
        }
    };
    let mut per_task = Vec::with_capacity(truth.len());
    for (y, p) in truth.iter().zip(predicted) {
        check_len(y, p, 0)?;
        per_task.push(score(y, p).ok());
    }
    let y: Vec<f64> = truth.concat();
    let p: Vec<f64> = predicted.concat();
    Ok(EvalReport {
        pooled: score(&y, &p)?,
        per_task,
    })
}

impl EvalReport {
    /// Pooled scores as `key=value` lines, then `task<t>.key=value` lines
    /// when `per_task` is set.
    pub fn to_key_value(&self, per_task: bool) -> String {
        let mut s = self.pooled.to_key_value();
        if per_task {
            for (t, r) in self.per_task.iter().enumerate() {
                if let Some(r) = r {
                    for (k, v) in r.fields() {
                        writeln!(s, "task{t}.{k}={v}").unwrap();
                    }
                }
            }
        }
        s
    }

    /// CSV with a `task` column (`all` for the pooled row).
    pub fn to_csv(&self) -> String {
        let names: Vec<&str> = self.pooled.fields().iter().map(|f| f.0).collect();
        let mut s = format!("task,{}\n", names.join(","));
        let row = |s: &mut String, label: &str, r: &Report| {
            let vals: Vec<String> = r.fields().iter().map(|f| f.1.to_string()).collect();
            writeln!(s, "{label},{}", vals.join(",")).unwrap();
        };
        row(&mut s, "all", &self.pooled);
        for (t, r) in self.per_task.iter().enumerate() {
            if let Some(r) = r {
                row(&mut s, &t.to_string(), r);
            }
        }
        s
    }
}
