//! The `biometry` binary end to end on small synthetic datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use biometry_cli::report::read_report;
use biometry_core::dataset::load_study_dir;
use biometry_core::femur::{femur_length, EndpointPair};
use biometry_core::geometry::{abdomen_biometrics, head_biometrics};
use biometry_core::hadlock_ga;
use biometry_nets::Checkpoint;
use biometry_train::{read_log, score_seg, seg_samples, SplitPlan, StudySource};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_biometry"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--out", s(&data), "--n", &n.to_string(), "--seed", &seed.to_string()]);
    data
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_is_deterministic_and_rejects_zero() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = synth(a.path(), 5, 7);
    let db = synth(b.path(), 5, 7);
    let (ta, tb) = (tree(&da), tree(&db));
    assert_eq!(ta.keys().filter(|p| p.ends_with("head.png")).count(), 5);
    assert_eq!(ta, tb);
    let other = synth(&a.path().join("x"), 5, 8);
    assert_ne!(tree(&other), ta);
    let out = run(&["synth", "--out", s(&a.path().join("none")), "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_ga_is_hadlock_of_truth() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 8, 11);
    let report = dir.path().join("oracle.csv");
    ok(&["estimate", "--data", s(&data), "--oracle", "--out", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().next().unwrap(), "study_id,hc_cm,bpd_cm,ac_cm,fl_cm,ga_weeks,warnings");
    let rows = read_report(&report).unwrap();
    let studies = load_study_dir(&data).unwrap();
    assert_eq!(rows.len(), studies.len());
    for (row, st) in rows.iter().zip(&studies) {
        assert_eq!(row.study_id, st.study_id);
        let head = st.head.as_ref().unwrap();
        let abd = st.abdomen.as_ref().unwrap();
        let fem = st.femur.as_ref().unwrap();
        let h = head_biometrics(head.mask.as_ref().unwrap(), head.image.spacing).unwrap();
        let a = abdomen_biometrics(abd.mask.as_ref().unwrap(), abd.image.spacing).unwrap();
        let ann = fem.annotation.unwrap();
        let fl = femur_length(&EndpointPair::ordered(ann.p1, ann.p2), fem.image.spacing).unwrap();
        assert_eq!(row.ga_weeks, Some(hadlock_ga(h.hc_cm, h.bpd_cm, a.ac_cm, fl)), "{}", row.study_id);
        assert!(row.warnings.is_empty(), "{}", row.warnings);
    }
}

#[test]
fn broken_studies_become_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, 2);
    fs::write(data.join("study_0001").join("head.png"), b"not a png").unwrap();
    let manifest = data.join("manifest.csv");
    let kept: Vec<String> = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("study_0002,femur"))
        .map(str::to_string)
        .collect();
    fs::write(&manifest, kept.join("\n") + "\n").unwrap();
    let report = dir.path().join("r.csv");
    let out = run(&["estimate", "--data", s(&data), "--oracle", "--out", s(&report)]);
    assert_eq!(out.status.code(), Some(0));
    let rows = read_report(&report).unwrap();
    assert_eq!(rows.len(), 4);
    let errors: Vec<_> = rows.iter().filter(|r| r.is_error()).map(|r| r.study_id.as_str()).collect();
    assert_eq!(errors, ["study_0001", "study_0002"]);
    assert!(rows[1].warnings.contains("study_0001"), "{}", rows[1].warnings);
    assert!(rows[2].warnings.contains("femur"), "{}", rows[2].warnings);
    assert!(rows[0].ga_weeks.is_some() && rows[3].ga_weeks.is_some());
    assert!(rows[1].ga_weeks.is_none() && rows[2].hc_cm.is_none());
}

#[test]
fn config_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3, 1);
    let out_dir = dir.path().join("t");
    let finetune = run(&["train", "--mode", "finetune", "--data", s(&data), "--out", s(&out_dir)]);
    assert_eq!(finetune.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&finetune.stderr).contains("ckpt-in"));
    let unknown = run(&["--set", "colour=blue", "synth", "--out", s(&out_dir), "--n", "1"]);
    assert_eq!(unknown.status.code(), Some(2));
    let missing = run(&["estimate", "--data", s(&dir.path().join("nowhere")), "--oracle", "--out", s(&out_dir)]);
    assert_eq!(missing.status.code(), Some(2));
    let no_ckpt = run(&["estimate", "--data", s(&data), "--out", s(&dir.path().join("r.csv"))]);
    assert_eq!(no_ckpt.status.code(), Some(2));
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "batch_size = 0\n").unwrap();
    let bad = run(&["--config", s(&cfg), "train", "--mode", "femur", "--data", s(&data), "--out", s(&out_dir)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn evaluate_identical_reports_gives_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6, 4);
    let report = dir.path().join("oracle.csv");
    ok(&["estimate", "--data", s(&data), "--oracle", "--out", s(&report)]);
    let ev = dir.path().join("ev");
    ok(&["evaluate", "--pred", s(&report), "--truth", s(&data), "--compare", s(&report), "--out", s(&ev)]);
    let mut r = csv::Reader::from_path(ev.join("errors.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
    for col in ["median", "iqr_low", "iqr_high", "worst5"] {
        assert!(header.iter().any(|h| h == col), "{col}");
    }
    let mut quantities = Vec::new();
    for rec in r.records() {
        let rec = rec.unwrap();
        quantities.push(rec[0].to_string());
        assert_eq!(&rec[1], "6");
        for i in 3..11 {
            assert_eq!(rec[i].parse::<f64>().unwrap(), 0.0, "{} column {}", &rec[0], header[i]);
        }
    }
    assert_eq!(quantities, ["hc_cm", "bpd_cm", "ac_cm", "fl_cm", "ga_weeks"]);
    assert!(ev.join("report.txt").exists());
    // All differences are zero, so the paired test has nothing to rank.
    let cmp = fs::read_to_string(ev.join("comparison.csv")).unwrap();
    assert!(cmp.starts_with("quantity,n,wilcoxon_statistic,p_value"));
}

/// Short pretrain, fine-tune and femur runs through the binary, then the
/// learned pipeline and a full evaluation.
#[test]
fn train_estimate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 12, 5);
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# tiny\ndata = {}\nbase_width = 8\nmodel_side = 32\nbatch_size = 4\nval_every = 2\n\
             epochs_pretrain = 4\nepochs_finetune = 2\nepochs_femur = 2\ncheckpoint_every = 2\nseed = 3\n",
            data.display()
        ),
    )
    .unwrap();
    let c = s(&cfg);
    let pre = dir.path().join("pre");
    ok(&["--config", c, "train", "--mode", "pretrain", "--out", s(&pre)]);
    let log = read_log(&pre.join("train_log.jsonl")).unwrap();
    assert_eq!(log.iter().filter(|r| r.split == "val").count(), 4 / 2);
    let plan: SplitPlan = serde_json::from_str(&fs::read_to_string(pre.join("split.json")).unwrap()).unwrap();
    assert_eq!(plan.train_ids.len() + plan.val_ids.len() + plan.test_ids.len(), 12);
    let best = Checkpoint::load(&pre.join("best.ckpt")).unwrap();
    let source = StudySource::open(&data).unwrap();
    let val = seg_samples(&source.load(&plan.val_ids).unwrap(), 32).unwrap();
    let rescored = score_seg(&best.model().unwrap(), &val).unwrap().mean_dice();
    assert!((rescored - best.header.metric_value).abs() < 1e-6);

    let fine = dir.path().join("fine");
    let fem = dir.path().join("fem");
    let best_path = pre.join("best.ckpt");
    ok(&["--config", c, "train", "--mode", "finetune", "--ckpt-in", s(&best_path), "--out", s(&fine)]);
    ok(&["--config", c, "train", "--mode", "femur", "--out", s(&fem)]);
    let fine_plan: SplitPlan = serde_json::from_str(&fs::read_to_string(fine.join("split.json")).unwrap()).unwrap();
    assert_eq!(fine_plan, plan);

    let report = dir.path().join("learned.csv");
    let seg_ckpt = fine.join("best.ckpt");
    let fem_ckpt = fem.join("best.ckpt");
    let sc = s(&seg_ckpt);
    let fc = s(&fem_ckpt);
    ok(&["--config", c, "estimate", "--seg-ckpt", sc, "--femur-ckpt", fc, "--out", s(&report)]);
    let rows = read_report(&report).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| !r.is_error()));

    let oracle = dir.path().join("oracle.csv");
    ok(&["estimate", "--data", s(&data), "--oracle", "--out", s(&oracle)]);
    let ev = dir.path().join("ev");
    let out = ok(&[
        "evaluate", "--pred", s(&report), "--truth", s(&data), "--compare", s(&oracle), "--seg-ckpt", sc,
        "--femur-ckpt", fc, "--out", s(&ev),
    ]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("hausdorff_mm") && table.contains("ga_weeks"), "{table}");
    let seg = fs::read_to_string(ev.join("segmentation.csv")).unwrap();
    assert_eq!(seg.lines().count(), 1 + 4);
}
