use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use circlenet::checkpoint::Checkpoint;
use circlenet::config::RunConfig;
use circlenet::detector::Detector;
use circlenet::io;

const SMALL: &str = "\
scene.width=64
scene.height=64
scene.min_figure_height=16
scene.max_figure_height=48
scene.max_occlusion=0.6
scene.count=60
backbone.levels=3
backbone.channels=16,32,32
backbone.stem_channels=16
backbone.blocks=1
circle.channels=16
circle.circles=2
anchor.base_size=6
anchor.ratios=0.41
head.fc_hidden=64
roi.level_k0=3
roi.level_canonical=32
rpn.batch=64
rpn.pre_nms_top=300
rpn.post_nms_top=64
roi.batch=32
infer.proposals=50
train.steps=40
train.warmup_steps=20
eval.subsets=all@20,none@20,partial@20,heavy@20
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_circlenet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn circlenet")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report_value(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} ")))
        .unwrap_or_else(|| panic!("`{key}` missing from report"))
        .split_whitespace()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn generate_writes_images_annotations_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", "scene.count=10\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["generate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["generate", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(fs::read_dir(a.join(io::IMAGES)).unwrap().count(), 10);
    assert!(a.join(io::ANNOTATIONS).exists());
    assert_eq!(fs::read(a.join(io::MANIFEST)).unwrap(), fs::read(b.join(io::MANIFEST)).unwrap());
    assert_eq!(fs::read(a.join(io::ANNOTATIONS)).unwrap(), fs::read(b.join(io::ANNOTATIONS)).unwrap());

    let c = dir.path().join("c");
    ok(&["generate", "--config", s(&cfg), "--seed", "5", "--out", s(&c)]);
    assert_ne!(fs::read(a.join(io::ANNOTATIONS)).unwrap(), fs::read(c.join(io::ANNOTATIONS)).unwrap());
}

#[test]
fn generate_zero_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", "scene.count=0\n");
    let out = dir.path().join("d");
    ok(&["generate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(fs::read_to_string(out.join(io::ANNOTATIONS)).unwrap(), format!("{}\n", io::ANNOTATION_HEADER));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "circle.circles=7/3\n").unwrap();
    let out = run(&["inspect", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("circle"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--out", "x"]).status.code(), Some(1));
    assert_eq!(run(&["inspect", "--config", s(&dir.path().join("missing.conf"))]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data", s(&dir.path().join("nothing")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn inspect_reports_sharing_structure_and_op_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for t in ["0", "1/2", "1", "3"] {
        let cfg = write_config(dir.path(), "c.conf", &format!("circle.circles={t}\n"));
        reports.push(ok(&["inspect", "--config", s(&cfg)]));
    }
    assert_eq!(report_value(&reports[0], "structure"), "FPN");
    assert_eq!(report_value(&reports[1], "structure"), "PANet");
    assert_eq!(
        report_value(&reports[2], "parameters.total"),
        report_value(&reports[3], "parameters.total")
    );
    let series: Vec<i64> = report_value(&reports[2], "ops.by_circles")
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let step = series[1] - series[0];
    assert!(step > 0 && series.windows(2).all(|w| w[1] - w[0] == step), "{series:?}");
    assert!(reports[3].contains("\nnode 0 input level=1"));
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "c.conf", "train.steps=0\nscene.count=4\nseed=11\n");
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    ok(&["generate", "--config", s(&cfg_path), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&out)]);
    let cfg = RunConfig::parse(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    let init = Detector::<f32>::new(cfg.detector.clone(), 11).unwrap();
    let want = Checkpoint::of(&init, &cfg, 0).to_bytes();
    assert_eq!(fs::read(out.join("checkpoint.bin")).unwrap(), want);
}

#[test]
fn train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", "");
    let train_data = dir.path().join("train");
    let test_data = dir.path().join("test");
    ok(&["generate", "--config", s(&cfg), "--seed", "1", "--out", s(&train_data)]);
    ok(&["generate", "--config", s(&cfg), "--seed", "2", "--out", s(&test_data)]);

    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    ok(&["train", "--config", s(&cfg), "--data", s(&train_data), "--out", s(&run_a)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&train_data), "--out", s(&run_b)]);
    let log = fs::read_to_string(run_a.join("loss_log.txt")).unwrap();
    assert_eq!(log, fs::read_to_string(run_b.join("loss_log.txt")).unwrap());
    assert_eq!(log.lines().count(), 41);
    assert!(log.starts_with("step total c1.rpn_cls"));
    assert_eq!(fs::read(run_a.join("checkpoint.bin")).unwrap(), fs::read(run_b.join("checkpoint.bin")).unwrap());

    let ev_a = dir.path().join("ev_a");
    let ev_b = dir.path().join("ev_b");
    let ck = run_a.join("checkpoint.bin");
    let stdout = ok(&["eval", "--config", s(&cfg), "--data", s(&test_data), "--checkpoint", s(&ck), "--out", s(&ev_a)]);
    assert!(stdout.contains("subset heavy@20 lamr"));
    ok(&["eval", "--data", s(&test_data), "--checkpoint", s(&ck), "--out", s(&ev_b)]);
    assert_eq!(fs::read(ev_a.join("report.txt")).unwrap(), fs::read(ev_b.join("report.txt")).unwrap());
    assert_eq!(fs::read(ev_a.join("detections.txt")).unwrap(), fs::read(ev_b.join("detections.txt")).unwrap());

    let other = write_config(dir.path(), "other.conf", "circle.channels=8\n");
    let out = run(&["eval", "--config", s(&other), "--data", s(&test_data), "--checkpoint", s(&ck), "--out", s(&ev_b)]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    let ours = RunConfig::parse(&fs::read_to_string(&other).unwrap()).unwrap().model_hash();
    let theirs = RunConfig::parse(&fs::read_to_string(&cfg).unwrap()).unwrap().model_hash();
    assert!(msg.contains(&ours) && msg.contains(&theirs), "{msg}");
}

#[test]
fn eval_of_ground_truth_and_of_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", "scene.count=30\n");
    let data = dir.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);

    let recs: Vec<io::Record> = io::read_records(&data.join(io::ANNOTATIONS))
        .unwrap()
        .into_iter()
        .map(|r| io::Record { visibility: None, score: Some(1.0), ..r })
        .collect();
    let perfect = dir.path().join("perfect.txt");
    io::write_records(&perfect, &recs).unwrap();
    let report = ok(&["eval", "--config", s(&cfg), "--data", s(&data), "--detections", s(&perfect), "--out", s(&dir.path().join("p"))]);
    for line in report.lines().filter(|l| l.starts_with("subset ")) {
        let lamr: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
        assert!(lamr <= 1e-9, "{line}");
    }

    let empty = dir.path().join("empty.txt");
    io::write_records(&empty, &[]).unwrap();
    let report = ok(&["eval", "--config", s(&cfg), "--data", s(&data), "--detections", s(&empty), "--out", s(&dir.path().join("e"))]);
    for line in report.lines().filter(|l| l.starts_with("subset ") && !l.ends_with("degenerate")) {
        let lamr: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
        assert_eq!(lamr, 1.0, "{line}");
    }
}

#[test]
fn training_beats_the_empty_detector_and_deeper_circle_sees_harder_instances() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", "scene.count=150\ntrain.steps=400\n");
    let train_data = dir.path().join("train");
    let test_data = dir.path().join("test");
    ok(&["generate", "--config", s(&cfg), "--seed", "1", "--out", s(&train_data)]);
    ok(&["generate", "--config", s(&cfg), "--seed", "2", "--out", s(&test_data)]);
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&train_data), "--out", s(&run_dir)]);
    let ck = run_dir.join("checkpoint.bin");
    let report = ok(&["eval", "--config", s(&cfg), "--data", s(&test_data), "--checkpoint", s(&ck), "--out", s(&dir.path().join("ev"))]);
    let lamr: f64 = report_value(&report, "subset all@20 lamr").parse().unwrap();
    assert!(lamr < 1.0, "{report}");

    let log = fs::read_to_string(run_dir.join("loss_log.txt")).unwrap();
    let mut lines = log.lines();
    let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect()).collect();
    let tail = &rows[rows.len() * 4 / 5..];
    let circle_mean = |c: &str| {
        let cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with(c)).map(|(i, _)| i).collect();
        tail.iter().map(|r| cols.iter().map(|&i| r[i]).sum::<f64>()).sum::<f64>() / tail.len() as f64
    };
    let (c1, c2) = (circle_mean("c1."), circle_mean("c2."));
    assert!(c2 >= c1, "circle 2 tail loss {c2:.4} below circle 1 {c1:.4}");
}
