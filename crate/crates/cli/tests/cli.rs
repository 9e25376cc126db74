use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tsdistill::models::{model_size_bits, StudentSetting};
use tsdistill::synthetic::{toy_three_class, write_ucr, ToySpec};

struct Workspace {
    dir: TempDir,
    train: PathBuf,
    test: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            per_class_train: 12,
            per_class_test: 6,
            length: 24,
            ..ToySpec::default()
        };
        let (train, test) = toy_three_class(&spec);
        let train_path = dir.path().join("toy_TRAIN.tsv");
        let test_path = dir.path().join("toy_TEST.tsv");
        write_ucr(&train_path, &train).unwrap();
        write_ucr(&test_path, &test).unwrap();
        Workspace {
            dir,
            train: train_path,
            test: test_path,
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train_teachers(&self, out: &Path, count: usize) -> Output {
        let count = count.to_string();
        run(
            out,
            &[
                "train-teachers",
                "--train",
                self.train.to_str().unwrap(),
                "--test",
                self.test.to_str().unwrap(),
                "--teachers",
                &count,
                "--blocks",
                "1",
                "--filters",
                "4",
                "--teacher-epochs",
                "15",
                "--teacher-batch-size",
                "8",
            ],
        )
    }
}

const QUICK_DISTILL: &[&str] = &[
    "--blocks",
    "1",
    "--filters",
    "4",
    "--epochs",
    "20",
    "--validation-interval",
    "5",
    "--batch-size",
    "8",
    "--lr",
    "0.1",
];

const QUICK_SEARCH: &[&str] = &[
    "--initial",
    "3",
    "--autoencoder-samples",
    "40",
    "--encoder-epochs",
    "100",
    "--finetune-epochs",
    "20",
    "--pool-size",
    "32",
];

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsdistill"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn distill(out: &Path, method: &str, extra: &[&str]) -> serde_json::Value {
    let mut args = vec!["distill", "--method", method];
    args.extend_from_slice(QUICK_DISTILL);
    args.extend_from_slice(extra);
    assert_ok(&run(out, &args));
    let text = fs::read_to_string(out.join("distill").join(method).join("report.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn search(out: &Path, strategy: &str, total: usize) -> Output {
    let total = total.to_string();
    let mut args = vec!["search", "--strategy", strategy, "--total", &total];
    args.extend_from_slice(QUICK_DISTILL);
    args.extend_from_slice(QUICK_SEARCH);
    run(out, &args)
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn teachers_are_persisted_and_reproducible() {
    let ws = Workspace::new();
    let (a, b) = (ws.out("a"), ws.out("b"));
    assert_ok(&ws.train_teachers(&a, 2));
    assert_ok(&ws.train_teachers(&b, 2));
    let mut names: Vec<String> = fs::read_dir(a.join("teachers"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "manifest.json",
            "teacher_0.train.csv",
            "teacher_0.val.csv",
            "teacher_1.train.csv",
            "teacher_1.val.csv"
        ]
    );
    for n in names.iter().filter(|n| n.ends_with(".csv")) {
        assert_eq!(
            fs::read(a.join("teachers").join(n)).unwrap(),
            fs::read(b.join("teachers").join(n)).unwrap(),
            "{n} differs"
        );
    }
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let ws = Workspace::new();
    let out = ws.out("o");
    let o = run(&out, &["train-teachers", "--train", "/nonexistent/x_TRAIN.tsv"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&out, &["train-teachers"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let ws = Workspace::new();
    let cfg = ws.dir.path().join("run.json");
    fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let o = run(&ws.out("o"), &["train-teachers", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_fails_before_training() {
    let ws = Workspace::new();
    let blocker = ws.dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let o = ws.train_teachers(&blocker.join("out"), 2);
    assert_eq!(o.status.code(), Some(1));
    assert!(!blocker.join("out").exists());
}

#[test]
fn held_lock_refuses_to_run() {
    let ws = Workspace::new();
    let out = ws.out("o");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".tsdistill.lock"), "").unwrap();
    let o = ws.train_teachers(&out, 2);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lock"));
    assert!(!out.join("teachers").exists());
}

#[test]
fn distill_methods_report_runs_and_size() {
    let ws = Workspace::new();
    let out = ws.out("o");
    assert_ok(&ws.train_teachers(&out, 3));

    let one = distill(&out, "aed-one", &["--setting", "[[2,10,4]]"]);
    assert_eq!(one["distill_runs"], 1);
    let setting = StudentSetting::from_json("[[2,10,4]]").unwrap();
    assert_eq!(one["size_bits"].as_u64().unwrap(), model_size_bits(&setting, 3, 1, 4));

    let guided = distill(&out, "lightts", &["--setting", "[[2,10,4]]"]);
    assert_eq!(guided["distill_runs"], 3);
    assert!(out.join("distill/lightts/removal_trace.json").exists());

    // the first leave-one-out level alone needs N + 1 runs
    let mut args = vec!["distill", "--method", "aed-loo", "--setting", "[[2,10,4]]", "--loo-budget", "2"];
    args.extend_from_slice(QUICK_DISTILL);
    assert_eq!(run(&out, &args).status.code(), Some(2));
    let loo = distill(&out, "aed-loo", &["--setting", "[[2,10,4]]", "--loo-budget", "5"]);
    let runs = loo["distill_runs"].as_u64().unwrap();
    assert!((4..=5).contains(&runs), "{runs} runs");
}

#[test]
fn classic_equals_aed_with_one_teacher() {
    let ws = Workspace::new();
    let out = ws.out("o");
    assert_ok(&ws.train_teachers(&out, 1));
    let classic = distill(&out, "classic", &["--setting", "[[1,10,8]]"]);
    let aed = distill(&out, "aed-one", &["--setting", "[[1,10,8]]"]);
    assert_eq!(classic["test_accuracy"], aed["test_accuracy"]);
    assert_eq!(classic["val_accuracy"], aed["val_accuracy"]);
}

#[test]
fn search_resumes_to_the_uninterrupted_result() {
    let ws = Workspace::new();
    let (full, split) = (ws.out("full"), ws.out("split"));
    for out in [&full, &split] {
        assert_ok(&ws.train_teachers(out, 2));
    }
    assert_ok(&search(&full, "encoded", 6));
    assert_ok(&search(&split, "encoded", 4));
    assert_eq!(csv_rows(&split.join("search/encoded/evaluations.csv")).len(), 4);
    assert_ok(&search(&split, "encoded", 6));
    for f in ["evaluations.csv", "frontier.csv"] {
        assert_eq!(
            fs::read(full.join("search/encoded").join(f)).unwrap(),
            fs::read(split.join("search/encoded").join(f)).unwrap(),
            "{f} differs"
        );
    }

    let frontier = csv_rows(&full.join("search/encoded/frontier.csv"));
    assert!(!frontier.is_empty());
    let sizes: Vec<u64> = frontier.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "frontier not sorted: {sizes:?}");
}

#[test]
fn truncated_evaluations_are_kept_and_completed() {
    let ws = Workspace::new();
    let out = ws.out("o");
    assert_ok(&ws.train_teachers(&out, 2));
    assert_ok(&search(&out, "random", 5));
    let path = out.join("search/random/evaluations.csv");
    let text = fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().take(4).collect();
    fs::write(&path, kept.join("\n") + "\n").unwrap();
    let before = csv_rows(&path);
    assert_eq!(before.len(), 3);

    assert_ok(&search(&out, "random", 5));
    let after = csv_rows(&path);
    assert_eq!(after.len(), 5);
    assert_eq!(&after[..3], &before[..]);
}

#[test]
fn report_on_empty_output_says_so() {
    let ws = Workspace::new();
    let o = run(&ws.out("empty"), &["report"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("no results"));
}

#[test]
fn report_collects_one_series_per_strategy() {
    let ws = Workspace::new();
    let out = ws.out("o");
    assert_ok(&ws.train_teachers(&out, 2));
    distill(&out, "aed-one", &["--setting", "[[2,10,4]]"]);
    assert_ok(&search(&out, "encoded", 5));
    assert_ok(&search(&out, "random", 5));
    let o = run(&out, &["report"]);
    assert_ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("aed-one"));

    let plot = csv_rows(&out.join("pareto_plot.csv"));
    let expected = csv_rows(&out.join("search/encoded/frontier.csv")).len()
        + csv_rows(&out.join("search/random/frontier.csv")).len();
    assert_eq!(plot.len(), expected);
    let mut series: Vec<String> = plot.iter().map(|r| r[2].to_string()).collect();
    series.dedup();
    assert_eq!(series, ["encoded", "random"]);
}
