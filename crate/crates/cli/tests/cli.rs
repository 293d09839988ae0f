use std::path::Path;
use std::process::{Command, Output};

fn subpre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subpre"))
        .args(args)
        .output()
        .expect("spawn subpre")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {text}");
    serde_json::from_str(lines[0]).expect("structured error line")
}

const SMALL: [&str; 16] = [
    "--set",
    "protocol.b_values=2,4",
    "--set",
    "protocol.epochs_pre=3",
    "--set",
    "protocol.epochs_ft=1",
    "--set",
    "dataset.synth.k=256",
    "--set",
    "dataset.synth.validation_k=64",
    "--set",
    "model.conv_filters=4",
    "--set",
    "model.hidden_units=8",
    "--set",
    "protocol.batch_size=32",
];

fn run_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", out.to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    subpre(&args)
}

#[test]
fn run_writes_artifacts_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_small(dir.path(), &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for f in [
        "runs.csv",
        "aggregate.csv",
        "manifest.json",
        "plotdata/loss.tsv",
        "plotdata/cost.tsv",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    let (runs, agg, manifest) = (
        read("runs.csv"),
        read("aggregate.csv"),
        read("manifest.json"),
    );
    // 1 baseline + 2 + 4 subset runs
    assert_eq!(String::from_utf8_lossy(&runs).lines().count(), 1 + 7);

    let o = run_small(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(read("runs.csv"), runs);
    assert_eq!(read("aggregate.csv"), agg);
    assert_eq!(read("manifest.json"), manifest);

    let o = subpre(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(read("runs.csv"), runs);
    assert_eq!(read("aggregate.csv"), agg);
}

#[test]
fn jobs_flag_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run_small(a.path(), &["--jobs", "1"]).status.code(), Some(0));
    assert_eq!(run_small(b.path(), &["--jobs", "3"]).status.code(), Some(0));
    for f in ["runs.csv", "aggregate.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn disallowed_divisor_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_small(dir.path(), &["--set", "protocol.b_values=3"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "config");
    assert_eq!(err["code"], 2);
    assert!(!dir.path().join("runs.csv").exists());
}

#[test]
fn unknown_key_and_verb_are_rejected() {
    let o = subpre(&["run", "--set", "protocol.epochs=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "config");
    let o = subpre(&["train"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing-here");
    let o = run_small(
        &dir.path().join("out"),
        &[
            "--set",
            "dataset.kind=mnist",
            "--set",
            &format!("dataset.path={}", missing.display()),
        ],
    );
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"], "data");
    let o = run_small(&dir.path().join("out"), &["--set", "dataset.kind=cifar10"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn all_runs_diverging_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_small(
        dir.path(),
        &[
            "--set",
            "optimizer.kind=sgd",
            "--set",
            "optimizer.schedule.a=1e308",
            "--set",
            "protocol.batch_size=full",
        ],
    );
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr_json(&o)["error"], "diverged");
    // artifacts are still written for inspection
    let runs = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert!(runs.lines().skip(1).all(|l| l.contains(",true,")));
}

#[test]
fn check_grad_default_spec_passes() {
    let o = subpre(&["check-grad"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let out = stdout(&o);
    for slot in [
        "conv1.kernel",
        "conv1.bias",
        "dense1.kernel",
        "dense1.bias",
        "output.kernel",
        "output.bias",
    ] {
        assert!(
            out.lines().any(|l| l.starts_with(slot)),
            "no worst coordinate for {slot}:\n{out}"
        );
    }
    let max: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("max_relative_error "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(max < 1e-4);
}

#[test]
fn check_grad_detects_corrupted_gradient() {
    let o = subpre(&["check-grad", "--corrupt-gradient"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "check_failed");
}

#[test]
fn check_grad_refuses_large_spec() {
    let o = subpre(&["check-grad", "--set", "dataset.kind=mnist"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["message"]
        .as_str()
        .unwrap()
        .contains("93322"));
}

#[test]
fn check_grad_accepts_small_config() {
    let o = subpre(&[
        "check-grad",
        "--set",
        "model.conv_filters=3",
        "--set",
        "model.hidden_units=5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

fn q_status(out: &str) -> Vec<(usize, String)> {
    out.lines()
        .filter_map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            (cols.len() == 4).then(|| cols[0].parse().ok().map(|b| (b, cols[3].to_string())))?
        })
        .collect()
}

#[test]
fn check_q_mnist_flags_from_eight() {
    let o = subpre(&["check-q", "--set", "dataset.kind=mnist"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let q: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("Q "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((q - 6.43).abs() < 5e-3, "{q}");
    let status = q_status(&out);
    assert_eq!(status.len(), 8);
    for (b, s) in status {
        let expected = if b >= 8 {
            "underdetermined"
        } else {
            "overdetermined"
        };
        assert_eq!(s, expected, "b={b}");
    }
}

#[test]
fn check_q_augmented_mnist_flags_only_128() {
    let o = subpre(&[
        "check-q",
        "--set",
        "dataset.kind=mnist",
        "--set",
        "dataset.augment=true",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let flagged: Vec<usize> = q_status(&stdout(&o))
        .into_iter()
        .filter(|(_, s)| s == "underdetermined")
        .map(|(b, _)| b)
        .collect();
    assert_eq!(flagged, vec![128]);
}

#[test]
fn check_q_prints_boundary() {
    let o = subpre(&["check-q", "--k", "777", "--m", "1", "--p", "777"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "Q 1.000000"), "{out}");
    assert_eq!(q_status(&out)[0], (1, "boundary".to_string()));
}

#[test]
fn synth_output_feeds_run() {
    let dir = tempfile::tempdir().unwrap();
    let idx = dir.path().join("idx");
    let o = subpre(&[
        "synth",
        "--out",
        idx.to_str().unwrap(),
        "--set",
        "dataset.synth.k=128",
        "--set",
        "dataset.synth.validation_k=32",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for f in [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ] {
        assert!(idx.join(f).is_file());
    }
    let o = run_small(
        &dir.path().join("out"),
        &[
            "--set",
            "dataset.kind=mnist",
            "--set",
            &format!("dataset.path={}", idx.display()),
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).starts_with("K=128 M=10"));
}

#[test]
fn synth_rejects_multichannel() {
    let o = subpre(&["synth", "--set", "dataset.synth.channels=3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(
        &cfg,
        "# mnist sizes\ndataset.kind = mnist\nmodel.hidden_units = 64\n",
    )
    .unwrap();
    let o = subpre(&["check-q", "--config", cfg.to_str().unwrap()]);
    assert!(stdout(&o).contains("P 93322"));
    let o = subpre(&[
        "check-q",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "model.hidden_units=0",
    ]);
    // 576*10+10 output weights replace 576*64+64 + 64*10+10
    assert!(stdout(&o).contains(&format!(
        "P {}",
        93322 - (576 * 64 + 64 + 64 * 10 + 10) + 576 * 10 + 10
    )));
    let o = subpre(&[
        "check-q",
        "--config",
        dir.path().join("absent.cfg").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
