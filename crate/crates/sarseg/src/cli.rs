//! Command line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 rejected
//! input. Failures print one line to stderr: `error[<category>]: <message>`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sarseg_core::numerics::{grad_check, required_op_set, OpDescriptor};
use sarseg_core::sampling::Split;

use crate::ablation::{ablation_matrix, AblationSpec, TABLE_ROWS};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Task};
use crate::error::{Error, Result};
use crate::format::{read_dataset, read_scenes, write_dataset, write_scenes, RemapFile};
use crate::pipeline::{build_dataset, parse_splits, synthesize, BuildConfig};
use crate::predict::predict_split;
use crate::pretraining::pretrain;
use crate::train::{evaluate_checkpoint, train};

#[derive(Debug, Parser)]
#[command(name = "sarseg", version, about = "Speckled SAR land-cover and water segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic long-tailed SAR scenes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        /// Scene edge length in pixels.
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample anchors, cut patches, remap classes and split scenes into a dataset.
    BuildDataset {
        /// Directory written by `synth`.
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        patch_size: usize,
        /// Anchor draws before de-duplication.
        #[arg(long, default_value_t = 20_000)]
        anchors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Remap table file; defaults to the built-in 14→9 merge.
        #[arg(long)]
        remap: Option<PathBuf>,
        /// `tag=split` assignment, repeatable; defaults to splitting tags in scene order.
        #[arg(long = "split")]
        splits: Vec<String>,
    },
    /// Mixed-image reconstruction pretraining of the encoder.
    Pretrain(RunArgs),
    /// Train a segmentation model (lulc or water).
    Finetune(RunArgs),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Must match the checkpoint when given.
        #[arg(long, value_enum)]
        task: Option<Task>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Metrics JSON path; a CSV is written next to it. Prints JSON when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: EvalOpts,
    },
    /// Write predicted label rasters (and water probabilities) for one split.
    Predict {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: EvalOpts,
    },
    /// Finite-difference checks of the differentiable operations.
    Gradcheck {
        /// Check every required operation.
        #[arg(long, conflicts_with = "op")]
        all: bool,
        /// Operation name, repeatable.
        #[arg(long)]
        op: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Run the refinement ablation and write a CSV table.
    Ablation {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Pretraining epochs per seed.
        #[arg(long, default_value_t = 25)]
        pretrain_epochs: usize,
        /// Pretraining batch size (even).
        #[arg(long, default_value_t = 8)]
        pretrain_batch_size: usize,
        /// Table rows to run, 1-based.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        rows: Vec<usize>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: RunConfig,
}

#[derive(Debug, Args)]
struct EvalOpts {
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    water_class: u8,
}

impl EvalOpts {
    fn spec(&self, task: Task) -> Result<crate::config::RunSpec> {
        RunConfig {
            task: Some(task),
            batch_size: Some(self.batch_size),
            threshold: Some(self.threshold),
            water_class: Some(self.water_class),
            ..Default::default()
        }
        .resolve(task)
    }
}

fn required(v: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    v.clone().ok_or_else(|| Error::Config(format!("`{key}` is required")))
}

fn ensure_distinct(input: &Path, output: &Path) -> Result<()> {
    let canon = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    if canon(output).starts_with(canon(input)) {
        return Err(Error::Config(format!("output {} lies inside the input {}", output.display(), input.display())));
    }
    Ok(())
}

fn run_gradcheck(all: bool, ops: &[String], seeds: u64) -> Result<bool> {
    let chosen: Vec<OpDescriptor> = if all || ops.is_empty() {
        required_op_set()
    } else {
        ops.iter()
            .map(|n| OpDescriptor::from_name(n).map_err(|_| Error::Config(format!("unknown operation {n:?}"))))
            .collect::<Result<_>>()?
    };
    if seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut ok = true;
    for op in &chosen {
        let mut worst = 0.0f64;
        let mut passed = true;
        for seed in 0..seeds {
            let r = grad_check(op, &op.default_shapes(), seed)?;
            worst = worst.max(r.max_rel_error);
            passed &= r.passed;
        }
        ok &= passed;
        println!(
            "{} {} max_rel_error={worst:.3e} tolerance={:.0e}",
            if passed { "PASS" } else { "FAIL" },
            op.name(),
            op.tolerance()
        );
    }
    Ok(ok)
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth { out, scenes, size, seed } => {
            let set = synthesize(scenes, size, seed)?;
            write_scenes(&out, &set)?;
            println!("wrote {} scenes to {}", set.rasters.len(), out.display());
        }
        Command::BuildDataset { scenes, out, patch_size, anchors, seed, remap, splits } => {
            ensure_distinct(&scenes, &out)?;
            let remap = match remap {
                Some(p) => RemapFile::load(&p)?,
                None => RemapFile::default_14_to_9(),
            };
            let splits = if splits.is_empty() { None } else { Some(parse_splits(&splits)?) };
            let cfg = BuildConfig { patch_size, anchors, seed, remap, splits };
            let set = read_scenes(&scenes)?;
            let ds = build_dataset(&set, &cfg)?;
            write_dataset(&out, &ds)?;
            let counts: Vec<String> =
                Split::ALL.iter().map(|&s| format!("{}={}", s.name(), ds.split(s).len())).collect();
            println!("wrote {} patches to {} ({})", ds.patches.len(), out.display(), counts.join(" "));
        }
        Command::Pretrain(args) => {
            let cfg = RunConfig::from_file_and_flags(args.config.as_deref(), &args.flags)?;
            let spec = cfg.resolve(Task::Pretrain)?;
            if spec.task != Task::Pretrain {
                return Err(Error::Config("`pretrain` runs the pretrain task".into()));
            }
            let (dpath, out) = (required(&cfg.dataset, "dataset")?, required(&cfg.out, "out")?);
            ensure_distinct(&dpath, &out)?;
            let ds = read_dataset(&dpath)?;
            let history = pretrain(&spec, &ds, &out)?;
            if let Some(last) = history.last() {
                println!("pretrained {} epochs, final loss {:.6}", last.epoch, last.loss);
            }
        }
        Command::Finetune(args) => {
            let cfg = RunConfig::from_file_and_flags(args.config.as_deref(), &args.flags)?;
            let spec = cfg.resolve(Task::Lulc)?;
            if spec.task == Task::Pretrain {
                return Err(Error::Config("`finetune` runs the lulc or water task".into()));
            }
            let (dpath, out) = (required(&cfg.dataset, "dataset")?, required(&cfg.out, "out")?);
            ensure_distinct(&dpath, &out)?;
            let ds = read_dataset(&dpath)?;
            let s = train(&spec, &ds, &out)?;
            match (s.best_epoch, s.best_metric) {
                (Some(e), Some(m)) => println!("best {} {m:.4} at epoch {e}", spec.task.name()),
                _ => println!("finished without a defined validation score"),
            }
        }
        Command::Eval { dataset, checkpoint, task, split, out, opts } => {
            let split = Split::from_name(&split)?;
            let ck = Checkpoint::load(&checkpoint)?;
            if let Some(t) = task {
                if t != ck.meta.task {
                    return Err(Error::Config(format!(
                        "checkpoint was trained for {}, not {}",
                        ck.meta.task.name(),
                        t.name()
                    )));
                }
            }
            let spec = opts.spec(ck.meta.task)?;
            let ds = read_dataset(&dataset)?;
            if let Some(o) = &out {
                ensure_distinct(&dataset, o)?;
            }
            let report = evaluate_checkpoint(&ck, &ds, split, &spec)?;
            match out {
                Some(p) => {
                    report.write(&p)?;
                    println!("{}", serde_json::to_string(&report).expect("serializable report"));
                }
                None => println!("{}", serde_json::to_string_pretty(&report).expect("serializable report")),
            }
        }
        Command::Predict { dataset, checkpoint, split, out, opts } => {
            let split = Split::from_name(&split)?;
            ensure_distinct(&dataset, &out)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let spec = opts.spec(ck.meta.task)?;
            let ds = read_dataset(&dataset)?;
            let n = predict_split(&ck, &ds, split, spec.batch_size, spec.threshold, &out)?;
            println!("wrote {n} predictions to {}", out.display());
        }
        Command::Gradcheck { all, op, seeds } => return run_gradcheck(all, &op, seeds),
        Command::Ablation { run, seeds, pretrain_epochs, pretrain_batch_size, rows } => {
            let cfg = RunConfig::from_file_and_flags(run.config.as_deref(), &run.flags)?;
            let finetune = cfg.resolve(Task::Lulc)?;
            if finetune.task != Task::Lulc {
                return Err(Error::Config("the ablation runs the lulc task".into()));
            }
            let pre_cfg = RunConfig {
                task: Some(Task::Pretrain),
                model: cfg.model,
                epochs: Some(pretrain_epochs),
                batch_size: Some(pretrain_batch_size),
                mask_ratio: cfg.mask_ratio,
                ..Default::default()
            };
            let pretrain = pre_cfg.resolve(Task::Pretrain)?;
            let rows = rows
                .iter()
                .map(|&r| {
                    if (1..=TABLE_ROWS.len()).contains(&r) {
                        Ok(r - 1)
                    } else {
                        Err(Error::Config(format!("row {r} outside 1..={}", TABLE_ROWS.len())))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let (dpath, out) = (required(&cfg.dataset, "dataset")?, required(&cfg.out, "out")?);
            ensure_distinct(&dpath, &out)?;
            let ds = read_dataset(&dpath)?;
            let spec = AblationSpec { finetune, pretrain, seeds, rows };
            let results = ablation_matrix(&ds, &spec, &out)?;
            print!("{}", crate::ablation::to_csv(&results));
        }
    }
    Ok(true)
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            if e.is_validation() {
                3
            } else {
                1
            }
        }
    }
}
