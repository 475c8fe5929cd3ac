use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
seed = 3
num_clients = 20
rounds = 4
warmup_rounds = 2

[data]
source = \"synthetic\"
num_classes = 3
train_per_class = 150
test_per_class = 50
dim = 16

[attack]
kind = \"badnet\"

[attack.trigger]
kind = \"pixel_patch\"
coordinates = []
value = 1.0
target_label = 0
poison_fraction = 0.2
";

fn fera(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fera"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("FERA_THREADS", t);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = fera(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary["final_ma"].as_f64().is_some());
    for f in ["rounds.csv", "metrics.csv", "timings.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("one"), dir.path().join("four"));
    assert!(fera(&["run", "--config", &cfg, "--out", a.to_str().unwrap()], Some("1")).status.success());
    assert!(fera(&["run", "--config", &cfg, "--out", b.to_str().unwrap()], Some("4")).status.success());
    for f in ["rounds.csv", "metrics.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_prints_one_line_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("sweep");
    let o = fera(
        &[
            "sweep",
            "--config",
            &cfg,
            "--axis",
            "alpha_dirichlet=0.1,1e6",
            "--axis",
            "aggregator.kind=fedavg,fera",
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 4);
    assert!(stdout.contains("alpha_dirichlet=0.1_aggregator.kind=fera"));
    assert!(out.join("alpha_dirichlet=1e6_aggregator.kind=fedavg").join("rounds.csv").exists());
}

#[test]
fn oracle_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = fera(&["oracle-check", "--config", &cfg, "--rounds", "3"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8(o.stdout).unwrap().contains("oracle-check passed"));
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\nrounds = \"many\"\n");
    let o = fera(&["run", "--config", &cfg], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let cfg = write_config(dir.path(), "malicious_fraction = 0.7\n");
    assert_eq!(fera(&["run", "--config", &cfg], None).status.code(), Some(2));
    assert_eq!(fera(&["run", "--config", "/nonexistent.toml"], None).status.code(), Some(2));
}
