use std::collections::BTreeMap;

use super::batching::{merge_shuffle, pack_batches, steps_per_epoch, MiniBatch};
use super::config::TrainConfig;
use super::metrics::MetricRow;
use crate::data::TaskDataset;
use crate::encoder::TokenizedInput;
use crate::error::{contract, Error, Result};
use crate::heads::{batch_loss, Gold, SoftPayload, TaskId};
use crate::model::{EncodedTask, ModelState};
use crate::numerics::{clip_grad_norm, lr_at, Adamax, Gradients, RngState, Tape, Tensor};

/// Stream tag for the training RNG derived from the seed.
const TRAIN_STREAM: u64 = 0x74_7261_696e;
/// Stream tag for heads created by fine-tuning on an unseen task.
const HEAD_STREAM: u64 = 0x6865_6164;

/// Position within a training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub epochs_done: usize,
    pub global_step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss per task over the epoch's batches.
    pub task_loss: BTreeMap<TaskId, f64>,
    /// Loss of every step, in order.
    pub step_losses: Vec<(TaskId, f64)>,
}

impl EpochReport {
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        self.task_loss
            .iter()
            .map(|(t, &v)| MetricRow {
                epoch: self.epoch,
                task: t.to_string(),
                split: "train".into(),
                metric: "loss".into(),
                value: v,
            })
            .collect()
    }
}

/// Loss of one single-task batch and its gradient for the shared layers
/// and that task's head.
///
/// `soft`, when given, holds one teacher payload per example of `data`.
/// Dropout draws from `rng` when `config` sets a nonzero rate.
pub fn batch_gradients(
    model: &ModelState,
    batch: &MiniBatch,
    data: &EncodedTask,
    soft: Option<&[SoftPayload]>,
    config: &TrainConfig,
    rng: &mut RngState,
) -> Result<(f64, Gradients)> {
    let task = &batch.task;
    if *task != data.spec.id {
        return Err(contract(format!("batch of task {task} paired with data of {}", data.spec.id)));
    }
    if batch.examples.is_empty() {
        return Err(contract("empty batch"));
    }
    let gamma = model.task(task)?.head.gamma();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, task, true)?;

    let mut inputs: Vec<&TokenizedInput> = Vec::new();
    let mut groups = Vec::with_capacity(batch.examples.len());
    let mut gold: Vec<Gold> = Vec::with_capacity(batch.examples.len());
    for &i in &batch.examples {
        let e = data
            .examples
            .get(i)
            .ok_or_else(|| contract(format!("example index {i} out of range")))?;
        inputs.extend(e.inputs.iter());
        groups.push(e.inputs.len());
        gold.push(e.gold);
    }
    let soft_refs: Option<Vec<&SoftPayload>> = match soft {
        None => None,
        Some(s) if s.len() == data.len() => Some(batch.examples.iter().map(|&i| &s[i]).collect()),
        Some(_) => return Err(contract("teacher payloads do not cover the dataset")),
    };

    let out = model.head_outputs(&mut tape, &bound, &inputs, rng, true, config.head_dropout(task))?;
    let loss = batch_loss(
        &mut tape,
        out,
        &data.spec,
        gamma,
        &groups,
        &gold,
        soft_refs.as_deref(),
        &config.loss_config(),
    )?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss of task {task}")));
    }
    Ok((value, tape.backward(loss)?))
}

/// One update on one single-task batch: forward, backward, clip, Adamax.
///
/// Only the shared layers and the batch task's head are bound as
/// parameters, so no other head can change. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut ModelState,
    batch: &MiniBatch,
    data: &EncodedTask,
    soft: Option<&[SoftPayload]>,
    config: &TrainConfig,
    optimizer: &mut Adamax,
    rng: &mut RngState,
    step_index: usize,
    total_steps: usize,
) -> Result<f64> {
    let task = &batch.task;
    let (value, mut grads) = batch_gradients(model, batch, data, soft, config, rng)?;
    clip_grad_norm(grads.tensors_mut(), config.max_grad_norm);
    let lr = lr_at(step_index + 1, total_steps, config.warmup_frac, config.base_lr)?;

    let params = model.trainable_mut(task)?;
    let mut updates: Vec<(&str, &mut Tensor, &Tensor)> = Vec::with_capacity(params.len());
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for ((_, p), name) in params.into_iter().zip(&names) {
        let g = grads
            .get(name)
            .ok_or_else(|| contract(format!("no gradient recorded for {name}")))?;
        updates.push((name.as_str(), p, g));
    }
    optimizer.step(updates, lr)?;
    Ok(value)
}

/// Joint trainer over a fixed set of task datasets.
///
/// Every epoch re-packs each task into shuffled single-task batches, merges
/// and shuffles them, then steps through the result.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelState,
    pub optimizer: Adamax,
    pub rng: RngState,
    pub progress: Progress,
    config: TrainConfig,
    tasks: BTreeMap<TaskId, EncodedTask>,
    soft: BTreeMap<TaskId, Vec<SoftPayload>>,
    total_steps: usize,
}

impl Trainer {
    pub fn new(model: ModelState, datasets: &[&TaskDataset], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if datasets.is_empty() {
            return Err(Error::Config("training needs at least one task".into()));
        }
        let mut tasks = BTreeMap::new();
        for d in datasets {
            let head = model.task(&d.spec.id)?;
            if head.spec != d.spec {
                return Err(Error::Config(format!("dataset spec for task {} does not match the model", d.spec.id)));
            }
            if d.is_empty() {
                return Err(Error::Data(format!("task {} has no training examples", d.spec.id)));
            }
            if tasks.insert(d.spec.id.clone(), model.encode_dataset(d)?).is_some() {
                return Err(Error::Config(format!("task {} given twice", d.spec.id)));
            }
        }
        let per_epoch = steps_per_epoch(tasks.values().map(EncodedTask::len), config.batch_size);
        Ok(Self {
            model,
            optimizer: Adamax::default(),
            rng: RngState::new(config.seed).fork(TRAIN_STREAM),
            progress: Progress::default(),
            total_steps: per_epoch * config.epoch_max,
            config,
            tasks,
            soft: BTreeMap::new(),
        })
    }

    /// Continues from saved optimizer, RNG and progress (taken at an epoch
    /// boundary).
    pub fn resume(mut self, optimizer: Adamax, rng: RngState, progress: Progress) -> Result<Self> {
        if progress.epochs_done > self.config.epoch_max
            || progress.global_step != progress.epochs_done * self.steps_per_epoch()
        {
            return Err(Error::Config(format!(
                "cannot resume at epoch {} step {} with {} steps per epoch over {} epochs",
                progress.epochs_done,
                progress.global_step,
                self.steps_per_epoch(),
                self.config.epoch_max
            )));
        }
        self.optimizer = optimizer;
        self.rng = rng;
        self.progress = progress;
        Ok(self)
    }

    /// Attaches teacher payloads (one per training example, in dataset
    /// order) to a task.
    pub fn set_soft_targets(&mut self, task: &TaskId, payloads: Vec<SoftPayload>) -> Result<()> {
        let data = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::Config(format!("task {task} is not being trained")))?;
        if payloads.len() != data.len() {
            return Err(Error::Data(format!(
                "task {task}: {} teacher payloads for {} examples",
                payloads.len(),
                data.len()
            )));
        }
        self.soft.insert(task.clone(), payloads);
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.total_steps / self.config.epoch_max
    }

    pub fn encoded(&self, task: &TaskId) -> Option<&EncodedTask> {
        self.tasks.get(task)
    }

    pub fn is_done(&self) -> bool {
        self.progress.epochs_done >= self.config.epoch_max
    }

    /// The batches of the next epoch (advances the RNG).
    fn next_epoch_batches(&mut self) -> Result<Vec<MiniBatch>> {
        let lists = self
            .tasks
            .iter()
            .map(|(id, d)| pack_batches(id, d.len(), self.config.batch_size, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(merge_shuffle(lists, &mut self.rng))
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        if self.is_done() {
            return Err(contract("training already finished"));
        }
        let batches = self.next_epoch_batches()?;
        let mut sums: BTreeMap<TaskId, (f64, usize)> = BTreeMap::new();
        let mut step_losses = Vec::with_capacity(batches.len());
        for batch in &batches {
            let data = &self.tasks[&batch.task];
            let soft = self.soft.get(&batch.task).map(Vec::as_slice);
            let loss = train_step(
                &mut self.model,
                batch,
                data,
                soft,
                &self.config,
                &mut self.optimizer,
                &mut self.rng,
                self.progress.global_step,
                self.total_steps,
            )?;
            self.progress.global_step += 1;
            let e = sums.entry(batch.task.clone()).or_insert((0.0, 0));
            e.0 += loss;
            e.1 += 1;
            step_losses.push((batch.task.clone(), loss));
        }
        self.progress.epochs_done += 1;
        Ok(EpochReport {
            epoch: self.progress.epochs_done,
            task_loss: sums.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect(),
            step_losses,
        })
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<Vec<EpochReport>> {
        let mut reports = vec![];
        while !self.is_done() {
            reports.push(self.run_epoch()?);
        }
        Ok(reports)
    }
}

/// Trains `model` jointly on all `datasets`.
pub fn train_mtl(model: ModelState, datasets: &[&TaskDataset], config: &TrainConfig) -> Result<(ModelState, Vec<EpochReport>)> {
    let mut trainer = Trainer::new(model, datasets, config.clone())?;
    let reports = trainer.run()?;
    Ok((trainer.model, reports))
}

/// Single-task training of shared layers and one head. An unseen task gets a
/// fresh head first.
pub fn finetune(mut model: ModelState, data: &TaskDataset, config: &TrainConfig) -> Result<(ModelState, Vec<EpochReport>)> {
    if !model.heads.contains_key(&data.spec.id) {
        let mut rng = RngState::new(config.seed).fork(HEAD_STREAM);
        model.reset_head(&data.spec, &mut rng);
    }
    train_mtl(model, &[data], config)
}
