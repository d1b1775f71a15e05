use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mtdnn::config::RunConfig;
use mtdnn::data::{
    corpus_vocabulary, gen_synthetic_suite, load_checkpoint, load_suite, save_checkpoint, save_suite, Checkpoint,
    Split, Suite, SuiteSizes, TaskDataset,
};
use mtdnn::distill::{
    distill_trainer, export_soft_targets, kl_to_store, train_teachers as train_ensemble, EnsembleSpec, KdConfig, SoftTargetStore,
    TeacherEnsemble,
};
use mtdnn::heads::TaskId;
use mtdnn::model::ModelState;
use mtdnn::mtl::{evaluate, finetune as finetune_model, write_metrics_csv, MetricRow, Trainer};
use mtdnn::numerics::RngState;
use mtdnn::Error;

use crate::manifest::{beside, ManifestBuilder};
use crate::{CliError, ConfigArgs};

const SEED_ENV: &str = "MTDNN_SEED";
const DEFAULT_SEED: u64 = 1;
/// Stream tag for fresh model initialization.
const INIT_STREAM: u64 = 0x696e_6974;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Core(Error::Config(msg.into()))
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| config_err(format!("{SEED_ENV}={s} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Default, then `MTDNN_SEED`, then the file, then flags.
pub fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut c = RunConfig::default();
    if let Some(seed) = env_seed()? {
        c.train.seed = seed;
    }
    if let Some(path) = &args.config {
        c.apply_text(&fs::read_to_string(path)?)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        c.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        c.train.seed = seed;
    }
    if let Some(e) = args.epochs {
        c.train.epoch_max = e;
    }
    c.validate()?;
    Ok(c)
}

fn parse_sizes(s: &str) -> Result<SuiteSizes, CliError> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--sizes expects train,dev,test counts, got `{s}`")))?;
    match parts[..] {
        [train, dev, test] => Ok(SuiteSizes { train, dev, test }),
        _ => Err(CliError::Usage(format!("--sizes expects three counts, got `{s}`"))),
    }
}

fn parse_task(s: &str) -> Result<TaskId, CliError> {
    s.parse::<TaskId>().map_err(CliError::from)
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse::<Split>().map_err(CliError::from)
}

fn trains(suite: &Suite) -> Vec<&TaskDataset> {
    suite.values().map(|s| &s.train).collect()
}

fn task_splits<'a>(suite: &'a Suite, task: &TaskId) -> Result<&'a mtdnn::data::TaskSplits, CliError> {
    suite
        .get(task)
        .ok_or_else(|| config_err(format!("task {task} is not in the data directory")))
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    create_parent(path)?;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<(), CliError> {
    create_parent(path)?;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_metrics_csv(rows, &mut f)?;
    f.flush()?;
    Ok(())
}

fn dev_rows(model: &ModelState, suite: &Suite, epoch: usize) -> Result<Vec<MetricRow>, CliError> {
    let mut rows = vec![];
    for (task, splits) in suite {
        if !model.heads.contains_key(task) || splits.dev.is_empty() {
            continue;
        }
        for (name, value) in evaluate(model, &splits.dev)?.rows() {
            rows.push(MetricRow {
                epoch,
                task: task.to_string(),
                split: "dev".into(),
                metric: name.into(),
                value,
            });
        }
    }
    Ok(rows)
}

/// A fresh model over the suite's training vocabulary with one head per task.
fn fresh_model(suite: &Suite, config: &RunConfig) -> Result<ModelState, CliError> {
    let vocab = corpus_vocabulary(&trains(suite))?;
    let mut enc = config.encoder.clone();
    enc.vocab_size = vocab.len();
    let mut rng = RngState::new(config.train.seed).fork(INIT_STREAM);
    let mut model = ModelState::new(enc, vocab, &mut rng)?;
    for splits in suite.values() {
        model.add_task(splits.spec().clone(), &mut rng)?;
    }
    Ok(model)
}

/// Registers heads for suite tasks the model lacks.
fn ensure_heads(model: &mut ModelState, suite: &Suite, seed: u64) {
    let mut rng = RngState::new(seed).fork(INIT_STREAM);
    for splits in suite.values() {
        if !model.heads.contains_key(&splits.spec().id) {
            model.reset_head(splits.spec(), &mut rng);
        }
    }
}

fn save_training(trainer: &Trainer, out: &Path) -> Result<(), CliError> {
    create_parent(out)?;
    let ck = Checkpoint {
        model: trainer.model.clone(),
        optimizer: trainer.optimizer.clone(),
        rng: trainer.rng,
        progress: trainer.progress,
        meta: Default::default(),
    };
    save_checkpoint(&ck, out)?;
    Ok(())
}

/// Runs epochs until done (or `stop_after`), collecting loss and dev rows,
/// plus KL rows for `kl_tasks`.
fn drive(
    trainer: &mut Trainer,
    suite: &Suite,
    stop_after: Option<usize>,
    kl: Option<(&SoftTargetStore, &BTreeSet<TaskId>)>,
) -> Result<Vec<MetricRow>, CliError> {
    let mut rows = vec![];
    while !trainer.is_done() && stop_after.is_none_or(|s| trainer.progress.epochs_done < s) {
        let report = trainer.run_epoch()?;
        rows.extend(report.metric_rows());
        rows.extend(dev_rows(&trainer.model, suite, report.epoch)?);
        if let Some((store, tasks)) = kl {
            for t in tasks {
                rows.push(MetricRow {
                    epoch: report.epoch,
                    task: t.to_string(),
                    split: "train".into(),
                    metric: "kl_to_teacher".into(),
                    value: kl_to_store(&trainer.model, store, &suite[t].train)?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn gen_data(seed: Option<u64>, out_dir: &Path, sizes: &str) -> Result<(), CliError> {
    let start = Instant::now();
    let sizes = parse_sizes(sizes)?;
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(DEFAULT_SEED),
    };
    let suite = gen_synthetic_suite(seed, sizes)?;
    fs::create_dir_all(out_dir)?;
    let files = save_suite(&suite, out_dir)?;
    let mut m = ManifestBuilder::new("gen-data");
    m.seed = Some(seed);
    m.outputs = files;
    m.write(&out_dir.join("manifest.json"), start.elapsed())
}

pub struct TrainMtlArgs {
    pub data_dir: PathBuf,
    pub config: ConfigArgs,
    pub init: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub stop_after: Option<usize>,
    pub out: PathBuf,
    pub metrics: Option<PathBuf>,
}

pub fn train_mtl(a: &TrainMtlArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let config = resolve_config(&a.config)?;
    let suite = load_suite(&a.data_dir)?;
    let mut inputs = vec![a.data_dir.clone()];
    let mut trainer = if let Some(path) = &a.resume {
        inputs.push(path.clone());
        let ck = load_checkpoint(path)?;
        Trainer::new(ck.model, &trains(&suite), config.train.clone())?.resume(ck.optimizer, ck.rng, ck.progress)?
    } else {
        let model = match &a.init {
            Some(path) => {
                inputs.push(path.clone());
                let mut m = load_checkpoint(path)?.model;
                ensure_heads(&mut m, &suite, config.train.seed);
                m
            }
            None => fresh_model(&suite, &config)?,
        };
        Trainer::new(model, &trains(&suite), config.train.clone())?
    };
    let rows = drive(&mut trainer, &suite, a.stop_after, None)?;
    save_training(&trainer, &a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(path) = &a.metrics {
        write_metrics(path, &rows)?;
        outputs.push(path.clone());
    }
    let mut m = ManifestBuilder::new("train-mtl");
    m.config = Some(config.to_text());
    m.seed = Some(config.train.seed);
    m.inputs = inputs;
    m.outputs = outputs;
    m.write(&beside(&a.out), start.elapsed())
}

pub struct TeacherArgs {
    pub task: String,
    pub base: PathBuf,
    pub data_dir: PathBuf,
    pub candidates: usize,
    pub keep: usize,
    pub dropout_rates: String,
    pub jobs: usize,
    pub config: ConfigArgs,
    pub out: PathBuf,
}

pub const MEMBER_PREFIX: &str = "member";

pub fn train_teachers(a: &TeacherArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let config = resolve_config(&a.config)?;
    let task = parse_task(&a.task)?;
    let rates = a
        .dropout_rates
        .split(',')
        .map(|r| r.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Usage(format!("--dropout-rates expects numbers, got `{}`", a.dropout_rates)))?;
    let spec = EnsembleSpec {
        candidates: a.candidates,
        keep: a.keep,
        dropout_rates: rates,
        base_seed: config.train.seed,
        jobs: a.jobs,
    };
    spec.validate()?;
    let suite = load_suite(&a.data_dir)?;
    let splits = task_splits(&suite, &task)?;
    let base = load_checkpoint(&a.base)?.model;
    let (ensemble, reports) = train_ensemble(&base, &splits.train, &splits.dev, &spec, &config.train)?;

    fs::create_dir_all(&a.out)?;
    let mut outputs = vec![];
    let kept: Vec<_> = reports.iter().filter(|r| r.kept).collect();
    for (k, (model, r)) in ensemble.members().iter().zip(kept).enumerate() {
        let mut ck = Checkpoint::of_model(model.clone());
        ck.meta.insert("task".into(), task.to_string());
        ck.meta.insert("candidate".into(), r.index.to_string());
        ck.meta.insert("dev_metric".into(), format!("{} {}", r.metric_name, r.dev_metric));
        let path = a.out.join(format!("{MEMBER_PREFIX}{k}.ckpt"));
        save_checkpoint(&ck, &path)?;
        outputs.push(path);
    }
    let rows: Vec<String> = reports
        .iter()
        .map(|r| format!("{},{},{},{},{},{}", r.index, r.seed, r.dropout_rate, r.metric_name, r.dev_metric, r.kept))
        .collect();
    let report_path = a.out.join("selection.csv");
    write_csv(&report_path, "candidate,seed,dropout_rate,metric_name,dev_metric,kept", &rows)?;
    outputs.push(report_path);

    let mut m = ManifestBuilder::new("train-teachers");
    m.config = Some(config.to_text());
    m.seed = Some(config.train.seed);
    m.inputs = vec![a.base.clone(), a.data_dir.clone()];
    m.outputs = outputs;
    m.write(&a.out.join("manifest.json"), start.elapsed())
}

/// Loads the members written by `train-teachers`, in member order.
pub fn load_ensemble(dir: &Path) -> Result<TeacherEnsemble, CliError> {
    if !dir.is_dir() {
        return Err(config_err(format!("ensemble directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<(usize, PathBuf)> = vec![];
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(k) = name
            .strip_prefix(MEMBER_PREFIX)
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|k| k.parse().ok())
        {
            paths.push((k, path));
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(config_err(format!("no ensemble members in {}", dir.display())));
    }
    let mut members = vec![];
    let mut task: Option<TaskId> = None;
    for (_, p) in &paths {
        let ck = load_checkpoint(p)?;
        let t = match ck.meta.get("task") {
            Some(t) => parse_task(t)?,
            None => return Err(config_err(format!("{} does not name its task", p.display()))),
        };
        if task.get_or_insert(t.clone()) != &t {
            return Err(config_err(format!("members in {} disagree on the task", dir.display())));
        }
        members.push(ck.model);
    }
    let task = task.expect("at least one member");
    let spec = members[0].task(&task)?.spec.clone();
    Ok(TeacherEnsemble::new(spec, members)?)
}

pub fn export_soft(dirs: &[PathBuf], data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let ensembles = dirs.iter().map(|d| load_ensemble(d)).collect::<Result<Vec<_>, _>>()?;
    let suite = load_suite(data_dir)?;
    let store = export_soft_targets(&ensembles, &trains(&suite))?;
    create_parent(out)?;
    store.save(out)?;
    let mut m = ManifestBuilder::new("export-soft");
    m.inputs = dirs.iter().cloned().chain([data_dir.to_path_buf()]).collect();
    m.outputs = vec![out.to_path_buf()];
    m.write(&beside(out), start.elapsed())
}

pub struct DistillArgs {
    pub data_dir: PathBuf,
    pub soft: Option<PathBuf>,
    pub init: PathBuf,
    pub teacher_tasks: String,
    pub config: ConfigArgs,
    pub out: PathBuf,
    pub metrics: Option<PathBuf>,
}

pub fn distill(a: &DistillArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let config = resolve_config(&a.config)?;
    let teacher_tasks: BTreeSet<TaskId> = a
        .teacher_tasks
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_task)
        .collect::<Result<_, _>>()?;
    let store = match &a.soft {
        Some(p) => SoftTargetStore::load(p)?,
        None if teacher_tasks.is_empty() => SoftTargetStore::default(),
        None => return Err(CliError::Usage("--teacher-tasks needs --soft".into())),
    };
    let suite = load_suite(&a.data_dir)?;
    let mut student = load_checkpoint(&a.init)?.model;
    ensure_heads(&mut student, &suite, config.train.seed);
    let kd = KdConfig {
        teacher_tasks,
        train: config.train.clone(),
    };
    let mut trainer = distill_trainer(student, &trains(&suite), &store, &kd)?;
    let rows = drive(&mut trainer, &suite, None, Some((&store, &kd.teacher_tasks)))?;
    save_training(&trainer, &a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(path) = &a.metrics {
        write_metrics(path, &rows)?;
        outputs.push(path.clone());
    }
    let mut m = ManifestBuilder::new("distill");
    m.config = Some(config.to_text());
    m.seed = Some(config.train.seed);
    m.inputs = [a.data_dir.clone(), a.init.clone()].into_iter().chain(a.soft.clone()).collect();
    m.outputs = outputs;
    m.write(&beside(&a.out), start.elapsed())
}

pub fn finetune(
    model: &Path,
    data_dir: &Path,
    task: &str,
    config: &ConfigArgs,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<(), CliError> {
    let start = Instant::now();
    let config = resolve_config(config)?;
    let task = parse_task(task)?;
    let suite = load_suite(data_dir)?;
    let splits = task_splits(&suite, &task)?;
    let base = load_checkpoint(model)?.model;
    let (tuned, reports) = finetune_model(base, &splits.train, &config.train)?;
    create_parent(out)?;
    save_checkpoint(&Checkpoint::of_model(tuned.clone()), out)?;
    let mut outputs = vec![out.to_path_buf()];
    if let Some(path) = metrics {
        let mut rows: Vec<MetricRow> = reports.iter().flat_map(|r| r.metric_rows()).collect();
        if !splits.dev.is_empty() {
            for (name, value) in evaluate(&tuned, &splits.dev)?.rows() {
                rows.push(MetricRow {
                    epoch: config.train.epoch_max,
                    task: task.to_string(),
                    split: "dev".into(),
                    metric: name.into(),
                    value,
                });
            }
        }
        write_metrics(path, &rows)?;
        outputs.push(path.to_path_buf());
    }
    let mut m = ManifestBuilder::new("finetune");
    m.config = Some(config.to_text());
    m.seed = Some(config.train.seed);
    m.inputs = vec![model.to_path_buf(), data_dir.to_path_buf()];
    m.outputs = outputs;
    m.write(&beside(out), start.elapsed())
}

/// `(task, metric_name, value)` for every task of the split the model has
/// a head for.
fn primary_metrics(model: &ModelState, suite: &Suite, split: Split) -> Result<Vec<(TaskId, &'static str, f64)>, CliError> {
    let mut out = vec![];
    for (task, splits) in suite {
        if model.heads.contains_key(task) {
            let m = evaluate(model, splits.get(split))?;
            out.push((task.clone(), m.primary_name(), m.primary()));
        }
    }
    if out.is_empty() {
        return Err(config_err("the model has no head for any task in the data directory"));
    }
    Ok(out)
}

pub fn eval(model: &Path, data_dir: &Path, split: &str, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let split = parse_split(split)?;
    let suite = load_suite(data_dir)?;
    let m = load_checkpoint(model)?.model;
    let mut rows = vec![];
    for (task, splits) in &suite {
        if m.heads.contains_key(task) {
            for (name, value) in evaluate(&m, splits.get(split))?.rows() {
                rows.push(format!("{task},{split},{name},{value}"));
            }
        }
    }
    if rows.is_empty() {
        return Err(config_err("the model has no head for any task in the data directory"));
    }
    write_csv(out, "task,split,metric_name,value", &rows)?;
    let mut man = ManifestBuilder::new("eval");
    man.inputs = vec![model.to_path_buf(), data_dir.to_path_buf()];
    man.outputs = vec![out.to_path_buf()];
    man.write(&beside(out), start.elapsed())
}

pub fn compare(model_a: &Path, model_b: &Path, data_dir: &Path, split: &str, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let split = parse_split(split)?;
    let suite = load_suite(data_dir)?;
    let a = primary_metrics(&load_checkpoint(model_a)?.model, &suite, split)?;
    let b = primary_metrics(&load_checkpoint(model_b)?.model, &suite, split)?;
    let mut rows = vec![];
    for (task, name, va) in &a {
        if let Some((_, _, vb)) = b.iter().find(|(t, _, _)| t == task) {
            rows.push(format!("{task},{name},{va},{vb},{}", vb - va));
        }
    }
    if rows.is_empty() {
        return Err(config_err("the two models share no task"));
    }
    write_csv(out, "task,metric_name,metric_a,metric_b,delta", &rows)?;
    let mut man = ManifestBuilder::new("compare");
    man.inputs = vec![model_a.to_path_buf(), model_b.to_path_buf(), data_dir.to_path_buf()];
    man.outputs = vec![out.to_path_buf()];
    man.write(&beside(out), start.elapsed())
}
