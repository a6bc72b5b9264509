//! Finetuning and evaluation loops over a dataset.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarseg_core::datagen::IGNORE;
use sarseg_core::engine::{predict, train_step, AdamW, Batch, Evaluation, Objective, Schedule, StepStats};
use sarseg_core::losses::class_weights;
use sarseg_core::model::SegModel;
use sarseg_core::numerics::Tensor;
use sarseg_core::sampling::{compute_class_stats, NormStats, PatchPair, Split};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
use crate::config::{RunSpec, Task};
use crate::error::{Error, Result};
use crate::format::Dataset;
use crate::report::MetricsReport;

/// Normalized images and task labels of one split, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub size: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<Vec<u8>>,
}

/// Binary water labels: 1 for `water_class`, 0 otherwise, ignore kept.
pub fn water_labels(labels: &[u8], water_class: u8) -> Vec<u8> {
    labels
        .iter()
        .map(|&l| match l {
            IGNORE => IGNORE,
            l if l == water_class => 1,
            _ => 0,
        })
        .collect()
}

impl Samples {
    pub fn new(patches: &[&PatchPair], norm: &NormStats, task: Task, water_class: u8) -> Self {
        let size = patches.first().map_or(0, |p| p.size);
        let images = patches.iter().map(|p| p.image.iter().map(|&v| norm.normalize(v)).collect()).collect();
        let labels = patches
            .iter()
            .map(|p| match task {
                Task::Water => water_labels(&p.labels, water_class),
                _ => p.labels.clone(),
            })
            .collect();
        Self { size, images, labels }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch<f32>> {
        let s = self.size;
        let mut images = Vec::with_capacity(idx.len() * s * s);
        let mut labels = Vec::with_capacity(idx.len() * s * s);
        for &i in idx {
            images.extend_from_slice(&self.images[i]);
            labels.extend_from_slice(&self.labels[i]);
        }
        Ok(Batch { images: Tensor::new(&[idx.len(), 1, s, s], images)?, labels })
    }
}

/// Shuffled sample order of one epoch; depends only on the seed and epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn objective(spec: &RunSpec, ds: &Dataset, train: &Samples) -> Result<Objective> {
    match spec.task {
        Task::Lulc => {
            let stats = compute_class_stats(train.labels.iter().map(|l| l.as_slice()), ds.num_classes())?;
            let w = class_weights(&stats)?;
            Ok(Objective::lulc(&w, spec.loss, spec.flags)?)
        }
        Task::Water => Ok(Objective::water()),
        Task::Pretrain => Err(Error::Config("finetuning needs the lulc or water task".into())),
    }
}

/// One finetuning run in progress.
pub struct Trainer {
    pub spec: RunSpec,
    pub model: SegModel<f32>,
    opt: AdamW<f32>,
    schedule: Schedule,
    objective: Objective,
    train: Samples,
    norm: NormStats,
    pretrained: bool,
    /// Optimizer steps taken.
    pub step: usize,
    pub best_metric: Option<f64>,
}

impl Trainer {
    /// Fresh model, optionally with a pretrained encoder.
    pub fn new(spec: &RunSpec, ds: &Dataset) -> Result<Self> {
        let train = Samples::new(&ds.split(Split::Train), &ds.norm, spec.task, spec.water_class);
        if train.is_empty() {
            return Err(Error::Config("the dataset has no training patches".into()));
        }
        let objective = objective(spec, ds, &train)?;
        let k = if spec.task == Task::Water { 1 } else { ds.num_classes() };
        let mut model = SegModel::new(spec.preset.model(ds.patch_size, k), spec.flags, spec.seed)?;
        let mut pretrained = false;
        if let Some(path) = &spec.pretrained {
            let ck = Checkpoint::load(path)?;
            if ck.meta.encoder != model.config().encoder {
                return Err(Error::Config(format!("{} holds an encoder of a different shape", path.display())));
            }
            let n = model.store_mut().load_prefix(&ck.store, "encoder.")?;
            if n == 0 {
                return Err(Error::Config(format!("{} holds no encoder parameters", path.display())));
            }
            pretrained = true;
        }
        let opt = AdamW::new(&spec.optim, model.store())?;
        let spe = train.len().div_ceil(spec.batch_size);
        let schedule = Schedule::new(spec.optim.clone(), spe, model.store().max_depth(), spec.batch_size)?;
        Ok(Self {
            spec: spec.clone(),
            model,
            opt,
            schedule,
            objective,
            train,
            norm: ds.norm,
            pretrained,
            step: 0,
            best_metric: None,
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(spec: &RunSpec, ds: &Dataset, ck: &Checkpoint) -> Result<Self> {
        let Some(state) = ck.optimizer.clone() else {
            return Err(Error::Config("checkpoint has no optimizer state to resume from".into()));
        };
        if ck.meta.task != spec.task || ck.meta.flags != Some(spec.flags) {
            return Err(Error::Config("checkpoint task or flags differ from the run configuration".into()));
        }
        let mut spec = spec.clone();
        spec.pretrained = None;
        let mut t = Self::new(&spec, ds)?;
        crate::checkpoint::restore(t.model.store_mut(), &ck.store)?;
        t.opt = AdamW::from_state(&spec.optim, t.model.store(), state)?;
        t.step = ck.meta.step;
        t.best_metric = ck.meta.best_metric;
        t.pretrained = ck.meta.pretrained;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.schedule.steps_per_epoch
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch()
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    /// Learning rate of the last layer at the current step.
    pub fn lr(&self) -> f64 {
        self.schedule.base_at(self.step)
    }

    /// The next minibatch of the current epoch and one update.
    pub fn step(&mut self) -> Result<StepStats> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (self.step / spe, self.step % spe);
        let order = epoch_order(self.train.len(), self.spec.seed, epoch);
        let bs = self.spec.batch_size;
        let idx = &order[pos * bs..((pos + 1) * bs).min(order.len())];
        let batch = self.train.batch(idx)?;
        let stats = train_step(&mut self.model, &mut self.opt, &self.schedule, self.step, &batch, &self.objective)?;
        self.step += 1;
        Ok(stats)
    }

    /// Runs the rest of the current epoch; returns the mean batch loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let spe = self.steps_per_epoch();
        let mut total = 0.0;
        let mut n = 0;
        loop {
            total += self.step()?.loss;
            n += 1;
            if self.step.is_multiple_of(spe) {
                break;
            }
        }
        Ok(total / n as f64)
    }

    pub fn evaluate(&self, samples: &Samples) -> Result<Evaluation> {
        evaluate(&self.model, &self.objective, samples, self.spec.batch_size, self.spec.threshold)
    }

    pub fn train_samples(&self) -> &Samples {
        &self.train
    }

    pub fn checkpoint(&self, metric: Option<f64>, with_optimizer: bool) -> Checkpoint {
        let cfg = self.model.config();
        Checkpoint {
            meta: CheckpointMeta {
                version: crate::checkpoint::CHECKPOINT_VERSION,
                kind: CheckpointKind::Segmentation,
                pretrained: self.pretrained,
                encoder: cfg.encoder.clone(),
                model: Some(cfg.clone()),
                flags: Some(self.model.flags()),
                task: self.spec.task,
                norm: self.norm,
                epoch: self.epoch(),
                step: self.step,
                metric,
                best_metric: self.best_metric,
                params: Vec::new(),
                optimizer_step: None,
            },
            store: self.model.store().clone(),
            optimizer: with_optimizer.then(|| self.opt.state().clone()),
        }
    }
}

/// Evaluation over `samples` in batches of `batch_size`.
pub fn evaluate(
    model: &SegModel<f32>,
    objective: &Objective,
    samples: &Samples,
    batch_size: usize,
    threshold: f64,
) -> Result<Evaluation> {
    let mut ev = Evaluation::for_model(model, objective, threshold);
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = samples.batch(chunk)?;
        let z = predict(model, &b.images)?;
        ev.accumulate(&z, &b.labels, objective.ignore_label())?;
    }
    Ok(ev)
}

/// One line of `history.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsReport,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(Error::io(path))?;
    writeln!(f, "{line}").map_err(Error::io(path))
}

/// Trains for the configured epochs (or the remainder after a resume),
/// evaluating on the validation split after each epoch. Writes
/// `history.jsonl`, `last/` (resumable) and `best/` under `out`.
pub fn train(spec: &RunSpec, ds: &Dataset, out: &Path) -> Result<TrainSummary> {
    let val = Samples::new(&ds.split(Split::Val), &ds.norm, spec.task, spec.water_class);
    if val.is_empty() {
        return Err(Error::Config("the dataset has no validation patches".into()));
    }
    let mut trainer = match &spec.resume {
        Some(dir) => Trainer::resume(spec, ds, &Checkpoint::load(dir)?)?,
        None => Trainer::new(spec, ds)?,
    };
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let hpath = out.join("history.jsonl");
    if spec.resume.is_none() && hpath.exists() {
        fs::remove_file(&hpath).map_err(Error::io(&hpath))?;
    }
    let mut summary = TrainSummary { history: Vec::new(), best_epoch: None, best_metric: trainer.best_metric };
    while trainer.epoch() < spec.epochs() {
        let lr = trainer.lr();
        let loss = trainer.run_epoch()?;
        let report = MetricsReport::new(&trainer.evaluate(&val)?, &ds.classes);
        let metric = report.primary();
        let rec = EpochRecord { epoch: trainer.epoch(), train_loss: loss, val: report, lr };
        append_line(&hpath, &serde_json::to_string(&rec).expect("serializable record"))?;
        let better = match (metric, trainer.best_metric) {
            (Some(m), Some(b)) => m > b,
            (Some(_), None) => true,
            (None, _) => !out.join("best").join("checkpoint.json").exists(),
        };
        if better {
            if metric.is_some() {
                trainer.best_metric = metric;
            }
            summary.best_epoch = Some(rec.epoch);
            summary.best_metric = trainer.best_metric;
            trainer.checkpoint(metric, false).save(&out.join("best"))?;
        }
        trainer.checkpoint(metric, true).save(&out.join("last"))?;
        summary.history.push(rec);
    }
    Ok(summary)
}

/// Evaluates a segmentation checkpoint on one split of a dataset.
pub fn evaluate_checkpoint(ck: &Checkpoint, ds: &Dataset, split: Split, spec: &RunSpec) -> Result<MetricsReport> {
    let model = ck.segmentation_model()?;
    let task = ck.meta.task;
    let k = model.config().num_classes;
    let expected = if task == Task::Water { 1 } else { ds.num_classes() };
    if k != expected || model.config().encoder.input_size != ds.patch_size {
        return Err(Error::Config(format!(
            "checkpoint predicts {k} classes at {} px; dataset needs {expected} at {} px",
            model.config().encoder.input_size,
            ds.patch_size
        )));
    }
    let objective = match task {
        Task::Water => Objective::water(),
        _ => Objective::lulc(&sarseg_core::losses::ClassWeights::uniform(k), spec.loss, model.flags())?,
    };
    let samples = Samples::new(&ds.split(split), &ck.meta.norm, task, spec.water_class);
    if samples.is_empty() {
        return Err(Error::Config(format!("split {} is empty", split.name())));
    }
    let ev = evaluate(&model, &objective, &samples, spec.batch_size, spec.threshold)?;
    Ok(MetricsReport::new(&ev, &ds.classes))
}
