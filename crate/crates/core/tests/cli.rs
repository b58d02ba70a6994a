use std::path::Path;
use std::process::{Command, Output};

use fednar::config::ExperimentConfig;
use fednar::data::{self, Split};
use fednar::experiment::{read_metrics_csv, METRICS_HEADER};
use fednar::numkit::RngStream;

fn fednar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fednar"))
        .args(args)
        .output()
        .expect("spawn")
}

fn small() -> ExperimentConfig {
    ExperimentConfig {
        classes: 3,
        per_class: 30,
        d_in: 4,
        hidden: 8,
        clients: 6,
        clients_per_round: 3,
        rounds: 5,
        tau: 3,
        batch_size: 8,
        ..ExperimentConfig::default()
    }
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", &small().to_text());
    let out = dir.path().join("m.csv");
    let o = fednar(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_metrics_csv(&out).unwrap();
    assert_eq!(rows.iter().map(|r| r.round).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
}

#[test]
fn run_without_out_prints_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", &small().to_text());
    let o = fednar(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn too_many_per_round_exits_one_naming_both() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}clients_per_round = 9\n",
        small().to_text().replace("clients_per_round = 3\n", "")
    );
    let cfg = write_config(dir.path(), "bad.cfg", &text);
    let o = fednar(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('9') && err.contains('6'), "{err}");
}

#[test]
fn unknown_key_and_missing_file_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "rounds = 3\nlearning_rate = 0.1\n");
    let o = fednar(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let missing = dir.path().join("nope.cfg");
    let o = fednar(&["run", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.cfg"));
}

#[test]
fn usage_error_exits_one() {
    assert_eq!(fednar(&["run"]).status.code(), Some(1));
    assert_eq!(fednar(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fednar(&["--help"]).status.code(), Some(0));
}

#[test]
fn sweep_writes_one_file_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", &small().to_text());
    let out = dir.path().join("sweep");
    let o = fednar(&[
        "sweep",
        "--config",
        &cfg,
        "--param",
        "u0",
        "--values",
        "1e-4,1e-3,1e-2,5e-2,1e-1",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for v in ["1e-4", "1e-3", "1e-2", "5e-2", "1e-1"] {
        assert_eq!(read_metrics_csv(&out.join(format!("u0_{v}.csv"))).unwrap().len(), 5);
    }
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 5);

    let o = fednar(&["sweep", "--config", &cfg, "--param", "nonsense", "--values", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn partition_stats_prints_tv() {
    let o = fednar(&["partition-stats", "--alpha", "0.3", "--clients", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("tv_to_uniform mean="));
    assert!(text.contains("disjoint cover ok"));
    assert_eq!(
        fednar(&["partition-stats", "--alpha", "-1", "--clients", "5"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn csv_dataset_with_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = data::make_blobs(3, 20, 4, 5.0, 1.0, &RngStream::new(7)).unwrap();
    data::save_csv(&blobs.train, &dir.path().join("train.csv")).unwrap();
    data::save_csv(&blobs.test, &dir.path().join("test.csv")).unwrap();
    let text = format!(
        "{}dataset = csv\ncsv_train = train.csv\ncsv_test = test.csv\n",
        small().to_text()
    );
    let cfg = write_config(dir.path(), "csv.cfg", &text);
    let o = fednar(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let loaded = data::load_csv(&dir.path().join("test.csv"), Split::Test).unwrap();
    assert_eq!(loaded.len(), blobs.test.len());
}

#[test]
fn check_passes_on_this_build() {
    let o = fednar(&["check"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 7, "{text}");
}
