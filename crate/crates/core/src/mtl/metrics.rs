use std::io::Write;

use crate::data::TaskDataset;
use crate::error::{contract, Error, Result};
use crate::heads::{Gold, TaskKind};
use crate::model::{EncodedTask, ModelState, Prediction};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metrics {
    Classification { accuracy: f64 },
    Regression {
        mse: f64,
        /// 0 when either side has zero variance (then `degenerate` is set).
        pearson: f64,
        degenerate: bool,
    },
    Ranking { top1: f64 },
}

impl Metrics {
    /// The headline number (higher is better): accuracy, Pearson or top-1.
    pub fn primary(&self) -> f64 {
        match *self {
            Metrics::Classification { accuracy } => accuracy,
            Metrics::Regression { pearson, .. } => pearson,
            Metrics::Ranking { top1 } => top1,
        }
    }

    pub fn primary_name(&self) -> &'static str {
        match self {
            Metrics::Classification { .. } => "accuracy",
            Metrics::Regression { .. } => "pearson",
            Metrics::Ranking { .. } => "top1",
        }
    }

    /// `(metric_name, value)` pairs for CSV output.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Metrics::Classification { accuracy } => vec![("accuracy", accuracy)],
            Metrics::Regression {
                mse,
                pearson,
                degenerate,
            } => vec![
                ("mse", mse),
                ("pearson", pearson),
                ("pearson_degenerate", if degenerate { 1.0 } else { 0.0 }),
            ],
            Metrics::Ranking { top1 } => vec![("top1", top1)],
        }
    }
}

/// Index of the first maximum.
fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn pearson(xs: &[f64], ys: &[f64]) -> (f64, bool) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        (0.0, true)
    } else {
        (sxy / (sxx * syy).sqrt(), false)
    }
}

/// Scores predictions against gold labels.
pub fn metrics_from_predictions(kind: TaskKind, preds: &[Prediction], gold: &[Gold]) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    if preds.len() != gold.len() {
        return Err(contract("prediction and label counts differ"));
    }
    let n = preds.len() as f64;
    match kind {
        TaskKind::SingleClassification | TaskKind::PairClassification => {
            let mut correct = 0usize;
            for (p, g) in preds.iter().zip(gold) {
                match (p, g) {
                    (Prediction::Class(probs), Gold::Class(c)) => correct += usize::from(argmax(probs) == *c),
                    _ => return Err(contract("prediction does not match a classification task")),
                }
            }
            Ok(Metrics::Classification {
                accuracy: correct as f64 / n,
            })
        }
        TaskKind::Regression => {
            let mut xs = Vec::with_capacity(preds.len());
            let mut ys = Vec::with_capacity(preds.len());
            for (p, g) in preds.iter().zip(gold) {
                match (p, g) {
                    (Prediction::Score(x), Gold::Score(y)) => {
                        xs.push(*x);
                        ys.push(*y);
                    }
                    _ => return Err(contract("prediction does not match a regression task")),
                }
            }
            let mse = xs.iter().zip(&ys).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
            let (pearson, degenerate) = pearson(&xs, &ys);
            Ok(Metrics::Regression {
                mse,
                pearson,
                degenerate,
            })
        }
        TaskKind::Ranking => {
            let mut hits = 0usize;
            for (p, g) in preds.iter().zip(gold) {
                match (p, g) {
                    (Prediction::Rank(scores), Gold::Rank(pos)) => hits += usize::from(argmax(scores) == *pos),
                    _ => return Err(contract("prediction does not match a ranking task")),
                }
            }
            Ok(Metrics::Ranking { top1: hits as f64 / n })
        }
    }
}

pub fn evaluate_encoded(model: &ModelState, data: &EncodedTask) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data(format!("task {}: cannot evaluate an empty dataset", data.spec.id)));
    }
    let preds = model.predict(data)?;
    let gold: Vec<Gold> = data.examples.iter().map(|e| e.gold).collect();
    metrics_from_predictions(data.spec.kind, &preds, &gold)
}

/// Dropout-free evaluation of `model` on one task dataset.
pub fn evaluate(model: &ModelState, data: &TaskDataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data(format!("task {}: cannot evaluate an empty dataset", data.spec.id)));
    }
    evaluate_encoded(model, &model.encode_dataset(data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub task: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Writes `epoch,task,split,metric_name,value` rows.
pub fn write_metrics_csv(rows: &[MetricRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "epoch,task,split,metric_name,value")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.epoch, r.task, r.split, r.metric, r.value)?;
    }
    Ok(())
}
