use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::store::SoftTargetStore;
use crate::data::{model_digest, ExampleRecord, TaskDataset};
use crate::error::{contract, Error, Result};
use crate::heads::{SoftPayload, TaskKind, TaskSpec};
use crate::model::{EncodedExample, EncodedTask, ModelState, Prediction};
use crate::mtl::{evaluate, finetune, TrainConfig};

/// Applies `f` to every item on up to `jobs` scoped worker threads. Output
/// order follows input order regardless of scheduling.
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = jobs.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// How teacher candidates are enumerated and how many are kept.
///
/// Candidate `i` fine-tunes with head dropout `dropout_rates[i % R]` and seed
/// `base_seed + i / R`, where `R` is the number of rates.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    pub candidates: usize,
    pub keep: usize,
    pub dropout_rates: Vec<f64>,
    pub base_seed: u64,
    /// Worker threads for candidate training.
    pub jobs: usize,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            candidates: 6,
            keep: 3,
            dropout_rates: vec![0.1, 0.2, 0.3],
            base_seed: 1,
            jobs: 1,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.keep == 0 {
            return Err(Error::Config("an ensemble keeps at least one member".into()));
        }
        if self.candidates < self.keep {
            return Err(Error::Config(format!(
                "cannot keep {} of {} candidates",
                self.keep, self.candidates
            )));
        }
        if self.dropout_rates.is_empty() || self.dropout_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("candidate dropout rates must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// `(seed, dropout_rate)` of candidate `i`.
    pub fn candidate(&self, i: usize) -> (u64, f64) {
        let r = self.dropout_rates.len();
        (self.base_seed + (i / r) as u64, self.dropout_rates[i % r])
    }
}

/// One row of the teacher selection report.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateReport {
    pub index: usize,
    pub seed: u64,
    pub dropout_rate: f64,
    pub metric_name: &'static str,
    pub dev_metric: f64,
    pub kept: bool,
}

/// The kept teachers of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherEnsemble {
    spec: TaskSpec,
    members: Vec<ModelState>,
}

impl TeacherEnsemble {
    pub fn new(spec: TaskSpec, members: Vec<ModelState>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config(format!("ensemble for {} has no members", spec.id)));
        }
        for m in &members {
            if m.task(&spec.id)?.spec != spec {
                return Err(Error::Config(format!("ensemble member disagrees on the spec of {}", spec.id)));
            }
        }
        Ok(Self { spec, members })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn members(&self) -> &[ModelState] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Averaged payload of every example of an encoded dataset.
    pub fn soft_targets_encoded(&self, data: &EncodedTask) -> Result<Vec<SoftPayload>> {
        if data.spec != self.spec {
            return Err(contract(format!(
                "{} data given to the ensemble of {}",
                data.spec.id, self.spec.id
            )));
        }
        let per_member = self
            .members
            .iter()
            .map(|m| {
                let gamma = m.task(&self.spec.id)?.head.gamma();
                Ok(m.predict(data)?
                    .into_iter()
                    .map(|p| match p {
                        Prediction::Score(s) => vec![s],
                        p => p.distribution(gamma).expect("non-regression prediction"),
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        (0..data.len())
            .map(|i| {
                let outputs: Vec<&[f64]> = per_member.iter().map(|m| m[i].as_slice()).collect();
                let avg = average_outputs(&outputs)?;
                Ok(match self.spec.kind {
                    TaskKind::SingleClassification | TaskKind::PairClassification => SoftPayload::ClassDist(avg),
                    TaskKind::Ranking => SoftPayload::RankDist(avg),
                    TaskKind::Regression => SoftPayload::Score(avg[0]),
                })
            })
            .collect()
    }

    pub fn soft_targets(&self, data: &TaskDataset) -> Result<Vec<SoftPayload>> {
        self.soft_targets_encoded(&self.members[0].encode_dataset(data)?)
    }
}

/// Coordinatewise mean of member outputs. Each coordinate's values are
/// summed in sorted order, so the result does not depend on member order.
pub fn average_outputs(outputs: &[&[f64]]) -> Result<Vec<f64>> {
    let first = outputs.first().ok_or_else(|| contract("no member outputs to average"))?;
    if outputs.iter().any(|o| o.len() != first.len()) {
        return Err(contract("member outputs differ in length"));
    }
    let k = outputs.len() as f64;
    let mut column = Vec::with_capacity(outputs.len());
    Ok((0..first.len())
        .map(|j| {
            column.clear();
            column.extend(outputs.iter().map(|o| o[j]));
            column.sort_by(f64::total_cmp);
            column[1..].iter().fold(column[0], |a, &v| a + v) / k
        })
        .collect())
}

/// Averaged teacher payload of a single example.
pub fn ensemble_soft_targets(ensemble: &TeacherEnsemble, example: &ExampleRecord) -> Result<SoftPayload> {
    if example.payload.kind() != ensemble.spec.kind || example.task != ensemble.spec.id {
        return Err(contract(format!(
            "{} example of task {} given to the {} ensemble of {}",
            example.payload.kind(),
            example.task,
            ensemble.spec.kind,
            ensemble.spec.id
        )));
    }
    let encoded = EncodedTask {
        spec: ensemble.spec.clone(),
        examples: vec![EncodedExample {
            id: example.id.clone(),
            inputs: ensemble.members[0].encode_record(example)?,
            gold: example.payload.gold(),
        }],
    };
    Ok(ensemble.soft_targets_encoded(&encoded)?.remove(0))
}

/// Fine-tunes `candidates` copies of `base` on one task, ranks them by dev
/// metric (descending, ties by candidate index) and keeps the best `keep`.
///
/// Members carry only the trained task's head.
pub fn train_teachers(
    base: &ModelState,
    train: &TaskDataset,
    dev: &TaskDataset,
    spec: &EnsembleSpec,
    config: &TrainConfig,
) -> Result<(TeacherEnsemble, Vec<CandidateReport>)> {
    spec.validate()?;
    config.validate()?;
    if train.spec != dev.spec {
        return Err(Error::Config("train and dev splits belong to different tasks".into()));
    }
    let task = &train.spec.id;
    let mut start = base.clone();
    start.heads.retain(|id, _| id == task);

    let indices: Vec<usize> = (0..spec.candidates).collect();
    let trained = parallel_map(&indices, spec.jobs, |&i| -> Result<(ModelState, CandidateReport)> {
        let (seed, rate) = spec.candidate(i);
        let mut cfg = config.clone();
        cfg.seed = seed;
        cfg.dropout_rate = rate;
        cfg.task_dropout.insert(task.clone(), rate);
        let (model, _) = finetune(start.clone(), train, &cfg)?;
        let metrics = evaluate(&model, dev)?;
        let report = CandidateReport {
            index: i,
            seed,
            dropout_rate: rate,
            metric_name: metrics.primary_name(),
            dev_metric: metrics.primary(),
            kept: false,
        };
        Ok((model, report))
    });
    let mut trained = trained.into_iter().collect::<Result<Vec<_>>>()?;
    let rank_key = |r: &CandidateReport| if r.dev_metric.is_nan() { f64::NEG_INFINITY } else { r.dev_metric };
    trained.sort_by(|(_, a), (_, b)| rank_key(b).total_cmp(&rank_key(a)));
    let mut members = vec![];
    let mut reports = vec![];
    for (rank, (model, mut report)) in trained.into_iter().enumerate() {
        report.kept = rank < spec.keep;
        if report.kept {
            members.push(model);
        }
        reports.push(report);
    }
    Ok((TeacherEnsemble::new(train.spec.clone(), members)?, reports))
}

/// Soft targets for every training example of every ensemble's task,
/// computed without dropout. Source digests identify the members.
pub fn export_soft_targets(ensembles: &[TeacherEnsemble], datasets: &[&TaskDataset]) -> Result<SoftTargetStore> {
    let mut store = SoftTargetStore::default();
    for e in ensembles {
        let data = datasets
            .iter()
            .find(|d| d.spec.id == e.spec.id)
            .ok_or_else(|| Error::Config(format!("no training data for teacher task {}", e.spec.id)))?;
        for (i, m) in e.members.iter().enumerate() {
            store.add_source(format!("{}/member{i}", e.spec.id), model_digest(m)?)?;
        }
        for (record, payload) in data.examples.iter().zip(e.soft_targets(data)?) {
            store.insert(&e.spec, &record.id, payload)?;
        }
    }
    Ok(store)
}
