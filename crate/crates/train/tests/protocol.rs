use std::collections::BTreeSet;

use biometry_core::dataset::StudyRecord;
use biometry_core::synth::{gen_dataset, gen_study, PhantomSpec};
use biometry_nets::{build_femur_unet, build_shared_unet, Checkpoint, NetConfig};
use biometry_train::trainer::{epoch_order, LAST};
use biometry_train::{
    femur_samples, finetune_seg, make_split, pretrain_seg, read_log, score_femur, score_seg, seg_samples,
    train_femur, RunOptions, StudySource, TrainConfig, TrainError,
};
use proptest::prelude::*;

const SIDE: usize = 32;

fn cfg() -> TrainConfig {
    TrainConfig {
        model_side: SIDE,
        epochs_pretrain: 5,
        epochs_finetune: 4,
        epochs_femur: 30,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn net() -> NetConfig {
    NetConfig {
        base_width: 8,
        ..NetConfig::default()
    }
}

fn studies(n: usize) -> Vec<StudyRecord> {
    let spec = PhantomSpec::default();
    (0..n).map(|i| gen_study(&spec, i).unwrap().record).collect()
}

fn pick(all: &[StudyRecord], ids: &[String]) -> Vec<StudyRecord> {
    all.iter().filter(|s| ids.contains(&s.study_id)).cloned().collect()
}

#[test]
fn split_sizes_for_114_studies() {
    let ids: Vec<String> = (0..114).map(|i| format!("p{i:03}")).collect();
    let plan = make_split(&ids, &TrainConfig::default(), 0).unwrap();
    assert!((28..=29).contains(&plan.test_ids.len()));
    assert!((8..=9).contains(&plan.val_ids.len()));
    assert!((76..=78).contains(&plan.train_ids.len()));
    assert_eq!(plan, make_split(&ids, &TrainConfig::default(), 0).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn split_is_a_partition(n in 4usize..300, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let plan = make_split(&ids, &TrainConfig::default(), seed).unwrap();
        let mut seen = BTreeSet::new();
        for id in plan.train_ids.iter().chain(&plan.val_ids).chain(&plan.test_ids) {
            prop_assert!(seen.insert(id.clone()), "{} twice", id);
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert!(!plan.train_ids.is_empty() && !plan.val_ids.is_empty() && !plan.test_ids.is_empty());
    }
}

#[test]
fn epoch_order_depends_on_seed_and_epoch_only() {
    assert_eq!(epoch_order(3, 7, 50), epoch_order(3, 7, 50));
    assert_ne!(epoch_order(3, 7, 50), epoch_order(3, 8, 50));
    let mut o = epoch_order(1, 1, 50);
    o.sort();
    assert_eq!(o, (0..50).collect::<Vec<_>>());
}

#[test]
fn pretraining_bookkeeping_and_progress() {
    let all = studies(50);
    let ids: Vec<String> = all.iter().map(|s| s.study_id.clone()).collect();
    let plan = make_split(&ids, &cfg(), 1).unwrap();
    let train = seg_samples(&pick(&all, &plan.train_ids), SIDE).unwrap();
    let val = seg_samples(&pick(&all, &plan.val_ids), SIDE).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain_seg(build_shared_unet(&net()).unwrap(), &train, &val, &cfg(), &RunOptions::new(dir.path())).unwrap();

    // Validation exactly at the even epochs.
    let val_epochs: Vec<usize> = out.log.iter().filter(|r| r.split == "val").map(|r| r.epoch).collect();
    assert_eq!(val_epochs, vec![2, 4]);
    assert_eq!(read_log(&out.log_path).unwrap(), out.log);

    // Stored metric equals the re-scored best checkpoint.
    let reloaded = Checkpoint::load(&out.best_path).unwrap();
    let rescored = score_seg(&reloaded.model().unwrap(), &val).unwrap().mean_dice();
    assert!((rescored - reloaded.header.metric_value).abs() <= 1e-6);
    assert_eq!(reloaded.header.epoch, out.best_epoch);

    let first = out.log.iter().find(|r| r.split == "val").unwrap();
    let first_mean = (first.dice_head.unwrap() + first.dice_abd.unwrap()) / 2.0;
    assert!(out.best_metric >= first_mean);

    assert!(out.accessed.iter().all(|id| !plan.test_ids.contains(id)));

    // Fine-tuning starts from the stored parameters.
    let dir2 = tempfile::tempdir().unwrap();
    let ft = finetune_seg(&reloaded, &train, &val, &cfg(), &RunOptions::new(dir2.path())).unwrap();
    assert_eq!(ft.log.iter().filter(|r| r.split == "train").count(), 4);
    assert_eq!(ft.best.header.net, reloaded.header.net);
}

#[test]
fn interrupted_run_resumes_identically() {
    let all = studies(12);
    let train = seg_samples(&all[..8], SIDE).unwrap();
    let val = seg_samples(&all[8..], SIDE).unwrap();
    let c = TrainConfig {
        epochs_pretrain: 6,
        checkpoint_every: 2,
        ..cfg()
    };
    let model = || build_shared_unet(&net()).unwrap();

    let full_dir = tempfile::tempdir().unwrap();
    let full = pretrain_seg(model(), &train, &val, &c, &RunOptions::new(full_dir.path())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        stop_after: Some(3),
        ..RunOptions::new(dir.path())
    };
    let partial = pretrain_seg(model(), &train, &val, &c, &opts).unwrap();
    assert_eq!(partial.epochs_run, 3);
    assert_eq!(Checkpoint::load(&dir.path().join(LAST)).unwrap().header.epoch, 2);

    let resumed = pretrain_seg(
        model(),
        &train,
        &val,
        &c,
        &RunOptions {
            resume: true,
            ..RunOptions::new(dir.path())
        },
    )
    .unwrap();
    assert_eq!(resumed.log, full.log);
    assert_eq!(resumed.best_epoch, full.best_epoch);
    assert_eq!(resumed.best.params, full.best.params);
}

#[test]
fn resume_without_checkpoint_fails() {
    let all = studies(6);
    let s = seg_samples(&all, SIDE).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        resume: true,
        ..RunOptions::new(dir.path())
    };
    let err = pretrain_seg(build_shared_unet(&net()).unwrap(), &s, &s, &cfg(), &opts).unwrap_err();
    assert!(matches!(err, TrainError::NothingToResume(_)));
}

#[test]
fn femur_training_keeps_lowest_validation_loss() {
    let all = studies(24);
    let train = femur_samples(&all[..20], SIDE).unwrap();
    let val = femur_samples(&all[20..], SIDE).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train_femur(build_femur_unet(&net()).unwrap(), &train, &val, &cfg(), &RunOptions::new(dir.path())).unwrap();

    let curve: Vec<(usize, f64)> = out
        .log
        .iter()
        .filter(|r| r.split == "val")
        .map(|r| (r.epoch, r.femur_loss.unwrap()))
        .collect();
    assert_eq!(curve.len(), 15);
    let argmin = curve.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(out.best_epoch, argmin.0);
    assert!(out.best_metric <= curve[0].1);
    let rescored = score_femur(&out.best.model().unwrap(), &val).unwrap();
    assert!((rescored - out.best_metric).abs() <= 1e-6);
}

#[test]
fn femur_training_needs_annotations() {
    let mut all = studies(6);
    for s in &mut all {
        s.femur.as_mut().unwrap().annotation = None;
    }
    let samples = femur_samples(&all, SIDE).unwrap();
    assert!(samples.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let err = train_femur(build_femur_unet(&net()).unwrap(), &samples, &samples, &cfg(), &RunOptions::new(dir.path()))
        .unwrap_err();
    assert!(matches!(err, TrainError::NoSamples(_)));
}

#[test]
fn test_studies_are_never_read() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_dataset(&PhantomSpec::default(), 12, &data).unwrap();
    let source = StudySource::open(&data).unwrap();
    let plan = make_split(&source.study_ids(), &cfg(), 2).unwrap();
    let train = seg_samples(&source.load(&plan.train_ids).unwrap(), SIDE).unwrap();
    let val = seg_samples(&source.load(&plan.val_ids).unwrap(), SIDE).unwrap();
    let c = TrainConfig { epochs_pretrain: 2, ..cfg() };
    let out = pretrain_seg(build_shared_unet(&net()).unwrap(), &train, &val, &c, &RunOptions::new(dir.path().join("run")))
        .unwrap();
    let test: BTreeSet<String> = plan.test_ids.iter().cloned().collect();
    assert!(source.accessed().is_disjoint(&test));
    assert!(out.accessed.is_disjoint(&test));
    assert_eq!(source.accessed(), plan.fitting_ids());
}

#[test]
fn single_branch_dataset_still_trains() {
    let mut all = studies(6);
    for s in &mut all {
        s.abdomen = None;
    }
    let s = seg_samples(&all, SIDE).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig { epochs_pretrain: 2, ..cfg() };
    let out = pretrain_seg(build_shared_unet(&net()).unwrap(), &s, &s, &c, &RunOptions::new(dir.path())).unwrap();
    let v = out.log.iter().find(|r| r.split == "val").unwrap();
    assert!(v.dice_head.is_some() && v.dice_abd.is_none());
}
