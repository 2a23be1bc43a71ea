use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fednsim");

const SMALL: &str = "\
# tiny run
num_classes = 3
train_per_class = 24
test_per_class = 10
input_dim = 4
hidden_dims = 8
num_clients = 4
shards_per_client = 2
sampling_ratio = 0.5
local_epochs = 1
batch_size = 10
rounds = 3
method = fedntd
checkpoint_every = 3
";

fn fednsim(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("FEDNSIM_THREADS").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = fednsim(&["run", &cfg, "--out", out.to_str().unwrap(), "--threads", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["rounds.csv", "summary.json", "manifest.json", "checkpoint_round_3.bin"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let logs = fednsim::io::parse_round_csv(&csv).unwrap();
    let history: Vec<_> = logs.iter().map(|l| l.class_acc.clone()).collect();
    let f = fednsim::metrics::forgetting_measure(&history).unwrap();
    assert_eq!(summary["forgetting_F"].as_f64().unwrap(), f);
    assert_eq!(summary["rounds"], 3);
    assert_eq!(summary["config"]["method"], "fedntd");

    let m = fednsim(&["metrics", out.join("rounds.csv").to_str().unwrap()]);
    assert_eq!(m.status.code(), Some(0));
    let text = String::from_utf8(m.stdout).unwrap();
    assert!(text.starts_with(&format!("forgetting_F={f}\n")), "{text}");
    assert_eq!(text.lines().count(), 2 + 2);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(fednsim(&["run", &cfg, "--out", a.to_str().unwrap(), "--seed", "1"]).status.success());
    assert!(fednsim(&["run", &cfg, "--out", b.to_str().unwrap(), "--seed", "2"]).status.success());
    assert_ne!(std::fs::read(a.join("rounds.csv")).unwrap(), std::fs::read(b.join("rounds.csv")).unwrap());
}

#[test]
fn partition_stats_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let export = dir.path().join("part.json");
    let o = fednsim(&["partition", &cfg, "--stats", "--export", export.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1 + 4);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(export).unwrap()).unwrap();
    let total: usize = v.as_object().unwrap().values().map(|c| c["indices"].as_array().unwrap().len()).sum();
    assert_eq!(total, 72);
}

#[test]
fn config_errors_exit_with_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "rounds = 3\nsampling_ratio = 2\n");
    let o = fednsim(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("sampling_ratio") && err.contains("line 2"), "{err}");

    let cfg = write_config(dir.path(), "colour = blue\n");
    assert_eq!(fednsim(&["run", &cfg]).status.code(), Some(1));
    assert_eq!(fednsim(&["run", "/nonexistent/exp.cfg"]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(fednsim(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fednsim(&[]).status.code(), Some(1));
    assert_eq!(fednsim(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "not,a,round,log\n").unwrap();
    assert_eq!(fednsim(&["metrics", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn verify_passes_and_exits_zero() {
    let o = fednsim(&["verify", "--trials", "20", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn threads_env_var_is_honoured_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    let bad = Command::new(BIN)
        .args(["run", &cfg, "--out", out.to_str().unwrap()])
        .env("FEDNSIM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let good = Command::new(BIN)
        .args(["run", &cfg, "--out", out.to_str().unwrap()])
        .env("FEDNSIM_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(good.status.code(), Some(0));
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = fednsim::config::ExperimentConfig::load(&path).unwrap();
        let again = fednsim::config::ExperimentConfig::from_text(&cfg.to_text(), Path::new(".")).unwrap();
        assert_eq!(cfg, again, "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 2);
}
