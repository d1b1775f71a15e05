use std::collections::BTreeSet;

use super::ensemble::TeacherEnsemble;
use super::store::SoftTargetStore;
use crate::data::TaskDataset;
use crate::error::{contract, Error, Result};
use crate::heads::{
    combined_loss, hard_ce_loss, mse_loss, ranking_loss, soft_ce_loss, soft_ranking_loss, Gold, LossConfig,
    RegressionTarget, SoftPayload, TaskId, TaskKind,
};
use crate::model::ModelState;
use crate::mtl::{EpochReport, TrainConfig, Trainer};
use crate::numerics::kernels::softmax_in_place;
use crate::numerics::tape::LOG_FLOOR;

#[derive(Clone, Debug, PartialEq)]
pub struct KdConfig {
    /// Tasks trained against teacher payloads; the rest use gold labels only.
    pub teacher_tasks: BTreeSet<TaskId>,
    /// Base training settings; `train.alpha` weights the hard-label term.
    pub train: TrainConfig,
}

fn payload_mismatch(kind: TaskKind, p: &SoftPayload) -> Error {
    Error::Data(format!("teacher payload {p:?} does not fit a {kind} task"))
}

/// Mean distillation loss of a batch, from raw head outputs.
///
/// `outputs[i]` holds example `i`'s logits (classification), its single
/// prediction (regression) or its candidate scores (ranking). Without
/// payloads this is the plain task loss.
pub fn kd_loss(
    outputs: &[Vec<f64>],
    gold: &[Gold],
    soft: Option<&[SoftPayload]>,
    kind: TaskKind,
    gamma: f64,
    cfg: &LossConfig,
) -> Result<f64> {
    if outputs.is_empty() || outputs.len() != gold.len() || soft.is_some_and(|s| s.len() != gold.len()) {
        return Err(contract("outputs, labels and payloads must align and be non-empty"));
    }
    let mut total = 0.0;
    for (i, (out, g)) in outputs.iter().zip(gold).enumerate() {
        let teacher = soft.map(|s| &s[i]);
        let loss = match (kind, *g) {
            (TaskKind::SingleClassification | TaskKind::PairClassification, Gold::Class(c)) => {
                let mut p = out.clone();
                softmax_in_place(&mut p);
                let hard = hard_ce_loss(&p, c)?;
                match teacher {
                    None => hard,
                    Some(SoftPayload::ClassDist(q)) => combined_loss(hard, soft_ce_loss(&p, q)?, cfg.alpha)?,
                    Some(other) => return Err(payload_mismatch(kind, other)),
                }
            }
            (TaskKind::Regression, Gold::Score(y)) => {
                let [pred] = out[..] else {
                    return Err(contract("regression output must be a single value"));
                };
                match (teacher, cfg.regression) {
                    (None, _) => mse_loss(pred, y),
                    (Some(SoftPayload::Score(t)), RegressionTarget::Teacher) => mse_loss(pred, *t),
                    (Some(SoftPayload::Score(t)), RegressionTarget::Blend) => {
                        combined_loss(mse_loss(pred, y), mse_loss(pred, *t), cfg.alpha)?
                    }
                    (Some(other), _) => return Err(payload_mismatch(kind, other)),
                }
            }
            (TaskKind::Ranking, Gold::Rank(pos)) => {
                let hard = ranking_loss(out, pos, gamma)?;
                match teacher {
                    None => hard,
                    Some(SoftPayload::RankDist(q)) => {
                        combined_loss(hard, soft_ranking_loss(out, q, gamma)?, cfg.alpha)?
                    }
                    Some(other) => return Err(payload_mismatch(kind, other)),
                }
            }
            (kind, g) => return Err(contract(format!("label {g:?} does not fit a {kind} task"))),
        };
        total += loss;
    }
    Ok(total / outputs.len() as f64)
}

/// A trainer over `datasets` whose teacher tasks carry payloads from
/// `store`, looked up by example id once up front.
pub fn distill_trainer(
    student: ModelState,
    datasets: &[&TaskDataset],
    store: &SoftTargetStore,
    kd: &KdConfig,
) -> Result<Trainer> {
    for t in &kd.teacher_tasks {
        if !datasets.iter().any(|d| &d.spec.id == t) {
            return Err(Error::Config(format!("teacher task {t} is not among the training tasks")));
        }
    }
    let mut trainer = Trainer::new(student, datasets, kd.train.clone())?;
    for d in datasets {
        if kd.teacher_tasks.contains(&d.spec.id) {
            trainer.set_soft_targets(&d.spec.id, store.payloads_for(d)?)?;
        }
    }
    Ok(trainer)
}

/// Multi-task training with hard plus soft objectives on teacher tasks and
/// hard objectives elsewhere.
pub fn train_distill(
    student: ModelState,
    datasets: &[&TaskDataset],
    store: &SoftTargetStore,
    kd: &KdConfig,
) -> Result<(ModelState, Vec<EpochReport>)> {
    let mut trainer = distill_trainer(student, datasets, store, kd)?;
    let reports = trainer.run()?;
    Ok((trainer.model, reports))
}

/// `Σ q·ln(q/p)` with both sides floored.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(contract("distributions differ in length"));
    }
    Ok(q
        .iter()
        .zip(p)
        .map(|(&a, &b)| {
            let a = a.max(LOG_FLOOR);
            a * (a.ln() - b.max(LOG_FLOOR).ln())
        })
        .sum())
}

fn mean_kl(student: &ModelState, data: &TaskDataset, teacher: &[SoftPayload]) -> Result<f64> {
    if data.spec.kind == TaskKind::Regression {
        return Err(contract(format!("KL is undefined for regression task {}", data.spec.id)));
    }
    if data.is_empty() {
        return Err(Error::Data(format!("task {} has no examples", data.spec.id)));
    }
    let gamma = student.task(&data.spec.id)?.head.gamma();
    let preds = student.predict(&student.encode_dataset(data)?)?;
    let mut total = 0.0;
    for (pred, t) in preds.iter().zip(teacher) {
        let p = pred.distribution(gamma).expect("non-regression prediction");
        let q = match t {
            SoftPayload::ClassDist(q) | SoftPayload::RankDist(q) => q,
            SoftPayload::Score(_) => return Err(contract("score payload on a distribution task")),
        };
        total += kl_divergence(q, &p)?;
    }
    Ok(total / data.len() as f64)
}

/// Mean KL from the ensemble's averaged distribution to the student's.
pub fn kl_to_teacher(student: &ModelState, ensemble: &TeacherEnsemble, data: &TaskDataset) -> Result<f64> {
    if ensemble.spec().kind == TaskKind::Regression {
        return Err(contract(format!("KL is undefined for regression task {}", ensemble.spec().id)));
    }
    mean_kl(student, data, &ensemble.soft_targets(data)?)
}

/// As [`kl_to_teacher`], against stored payloads.
pub fn kl_to_store(student: &ModelState, store: &SoftTargetStore, data: &TaskDataset) -> Result<f64> {
    if data.spec.kind == TaskKind::Regression {
        return Err(contract(format!("KL is undefined for regression task {}", data.spec.id)));
    }
    mean_kl(student, data, &store.payloads_for(data)?)
}
