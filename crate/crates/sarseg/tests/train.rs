mod common;

use std::fs;

use sarseg::ablation::{ablation_matrix, median, AblationSpec, TABLE_ROWS};
use sarseg::checkpoint::{Checkpoint, CheckpointKind};
use sarseg::config::{RunConfig, RunSpec, Task};
use sarseg::pretraining::pretrain;
use sarseg::report::MetricsReport;
use sarseg::train::{evaluate_checkpoint, train, EpochRecord, Trainer};
use sarseg_core::sampling::Split;

fn spec(task: Task, epochs: usize) -> RunSpec {
    RunConfig { task: Some(task), epochs: Some(epochs), batch_size: Some(4), ..Default::default() }
        .resolve(task)
        .unwrap()
}

#[test]
fn two_epochs_write_history_and_best_checkpoint() {
    let ds = common::small_dataset(0);
    let out = tempfile::tempdir().unwrap();
    let s = train(&spec(Task::Lulc, 2), &ds, out.path()).unwrap();
    assert_eq!(s.history.len(), 2);
    let lines: Vec<EpochRecord> = fs::read_to_string(out.path().join("history.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, s.history);
    assert_eq!(lines.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2]);
    let best = Checkpoint::load(&out.path().join("best")).unwrap();
    assert_eq!(best.meta.kind, CheckpointKind::Segmentation);
    assert!(best.optimizer.is_none());
    assert_eq!(Some(best.meta.epoch), s.best_epoch);
    let last = Checkpoint::load(&out.path().join("last")).unwrap();
    assert_eq!(last.meta.epoch, 2);
    assert!(last.optimizer.is_some());
    // The best checkpoint's score is the best validation score in the history.
    let top = s.history.iter().filter_map(|r| r.val.primary()).fold(f64::MIN, f64::max);
    assert_eq!(best.meta.metric, Some(top));
    let report = evaluate_checkpoint(&best, &ds, Split::Val, &spec(Task::Lulc, 2)).unwrap();
    assert_eq!(report.primary(), Some(top));
    match report {
        MetricsReport::Lulc { metrics, .. } => assert_eq!(metrics.iou.len(), ds.num_classes()),
        _ => panic!("expected a segmentation report"),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ds = common::small_dataset(0);
    let mut t = Trainer::new(&spec(Task::Lulc, 3), &ds).unwrap();
    t.step().unwrap();
    let ck = t.checkpoint(Some(0.25), true);
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    let bits = |s: &sarseg_core::model::ParamStore<f32>| -> Vec<u32> {
        s.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    };
    assert_eq!(bits(&back.store), bits(&ck.store));
    assert_eq!(back.store, ck.store);
    assert_eq!(back.optimizer, ck.optimizer);
    assert_eq!(back.meta.step, 1);
    let model = back.segmentation_model().unwrap();
    assert_eq!(model.store(), t.model.store());
}

#[test]
fn resume_reproduces_the_next_step_loss() {
    let ds = common::small_dataset(1);
    let s = spec(Task::Lulc, 4);
    let mut a = Trainer::new(&s, &ds).unwrap();
    for _ in 0..3 {
        a.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    a.checkpoint(None, true).save(dir.path()).unwrap();
    let mut b = Trainer::resume(&s, &ds, &Checkpoint::load(dir.path()).unwrap()).unwrap();
    assert_eq!(b.step, 3);
    for _ in 0..2 {
        let (la, lb) = (a.step().unwrap().loss, b.step().unwrap().loss);
        assert_eq!(la.to_bits(), lb.to_bits());
    }
    assert_eq!(a.model.store(), b.model.store());
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let ds = common::small_dataset(1);
    let (full, part) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let whole = train(&spec(Task::Lulc, 2), &ds, full.path()).unwrap();
    // Stop after one epoch of the two-epoch schedule and continue from there.
    let mut t = Trainer::new(&spec(Task::Lulc, 2), &ds).unwrap();
    t.run_epoch().unwrap();
    t.checkpoint(None, true).save(&part.path().join("last")).unwrap();
    let mut cont = spec(Task::Lulc, 2);
    cont.resume = Some(part.path().join("last"));
    let rest = train(&cont, &ds, part.path()).unwrap();
    assert_eq!(rest.history.len(), 1);
    assert_eq!(rest.history[0].train_loss.to_bits(), whole.history[1].train_loss.to_bits());
}

#[test]
fn training_is_deterministic() {
    let ds = common::small_dataset(2);
    let s = spec(Task::Lulc, 2);
    let run = || {
        let mut t = Trainer::new(&s, &ds).unwrap();
        (0..3).map(|_| t.step().unwrap().loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn water_task_reports_water_iou() {
    let ds = common::small_dataset(3);
    let out = tempfile::tempdir().unwrap();
    let s = train(&spec(Task::Water, 1), &ds, out.path()).unwrap();
    match &s.history[0].val {
        MetricsReport::Water { threshold, .. } => assert_eq!(*threshold, 0.5),
        other => panic!("unexpected report {other:?}"),
    }
    let best = Checkpoint::load(&out.path().join("best")).unwrap();
    assert_eq!(best.meta.task, Task::Water);
    assert_eq!(best.meta.model.as_ref().unwrap().num_classes, 1);
}

#[test]
fn finetuning_starts_from_the_pretrained_encoder() {
    let ds = common::small_dataset(4);
    let out = tempfile::tempdir().unwrap();
    pretrain(&spec(Task::Pretrain, 1), &ds, out.path()).unwrap();
    let enc = Checkpoint::load(&out.path().join("encoder")).unwrap();
    assert_eq!(enc.meta.kind, CheckpointKind::Encoder);
    assert!(enc.meta.pretrained);
    assert!(enc.store.iter().all(|p| p.name.starts_with("encoder.")));
    let mut s = spec(Task::Lulc, 1);
    s.pretrained = Some(out.path().join("encoder"));
    let t = Trainer::new(&s, &ds).unwrap();
    for p in enc.store.iter() {
        let id = t.model.store().find(&p.name).unwrap();
        assert_eq!(t.model.store().get(id).value, p.value);
    }
    assert!(t.checkpoint(None, false).meta.pretrained);
    // A segmentation checkpoint cannot stand in for an encoder of another size.
    let mut wrong = s.clone();
    wrong.preset = sarseg::config::ModelPreset::Full;
    assert!(Trainer::new(&wrong, &ds).is_err());
}

#[test]
fn pretraining_rejects_odd_batches() {
    let e = RunConfig { task: Some(Task::Pretrain), batch_size: Some(3), ..Default::default() }
        .resolve(Task::Pretrain)
        .unwrap_err();
    assert_eq!(e.category(), "config");
}

#[test]
fn config_file_keys_and_flags_merge() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.json");
    fs::write(&p, r#"{"base_lr": 0.001, "epochs": 7, "refine_up": false}"#).unwrap();
    let flags = RunConfig { epochs: Some(9), ..Default::default() };
    let cfg = RunConfig::from_file_and_flags(Some(&p), &flags).unwrap();
    let s = cfg.resolve(Task::Lulc).unwrap();
    assert_eq!(s.optim.base_lr, 0.001);
    assert_eq!(s.optim.total_epochs, 9);
    assert!(!s.flags.refine_up && s.flags.high_res_injection);
    fs::write(&p, r#"{"learning_rate": 0.001}"#).unwrap();
    assert_eq!(RunConfig::load(&p).unwrap_err().category(), "manifest");
}

#[test]
fn ablation_table_has_five_rows_and_is_reproducible() {
    let ds = common::small_dataset(5);
    let finetune = spec(Task::Lulc, 1);
    let mut pre = spec(Task::Pretrain, 1);
    pre.batch_size = 2;
    let a = AblationSpec { finetune, pretrain: pre, seeds: vec![0], rows: (0..5).collect() };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r1 = ablation_matrix(&ds, &a, d1.path()).unwrap();
    let r2 = ablation_matrix(&ds, &a, d2.path()).unwrap();
    assert_eq!(r1, r2);
    let csv = fs::read_to_string(d1.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0], "pretraining,high_res_feat,refine_up,alpha_scale,miou,macc");
    let flags: Vec<String> = lines[1..].iter().map(|l| l.split(',').take(4).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(flags, ["yes,no,no,no", "yes,yes,no,no", "yes,yes,yes,no", "no,yes,yes,yes", "yes,yes,yes,yes"]);
    assert_eq!(csv, fs::read_to_string(d2.path().join("ablation.csv")).unwrap());
    for (res, row) in r1.iter().zip(TABLE_ROWS) {
        assert_eq!(res.spec, row);
        // Each row's score is its best checkpoint re-evaluated.
        let dir = d1.path().join(format!("seed0/row{}", res.row + 1));
        let best = Checkpoint::load(&dir.join("best")).unwrap();
        assert_eq!(best.meta.metric, res.runs[0].miou);
        assert_eq!(best.meta.pretrained, row.pretraining);
    }
}

#[test]
fn median_of_defined_values() {
    assert_eq!(median([Some(3.0), None, Some(1.0), Some(2.0)]), Some(2.0));
    assert_eq!(median([Some(1.0), Some(4.0)]), Some(2.5));
    assert_eq!(median([None]), None);
}
