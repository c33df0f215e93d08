use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qflow_core::agent::Agent;
use qflow_core::config::RunConfig;
use qflow_core::trainer::{evaluate, train_with_output, RunOutput, METRICS_HEADER};

const TINY: &str = "\
env.kind = chain
env.num_actuators = 3
env.horizon = 20
train.total_env_steps = 400
train.parallel_envs = 2
train.warmup = 100
train.batch_size = 16
train.eval_every = 200
train.eval_episodes = 2
train.wall_time = false
network.critic_hidden = 8,8
network.policy_hidden = 8
network.flow_hidden = 8
";

fn qflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qflow"))
        .args(args)
        .env_remove("QFLOW_OUTDIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn missing_config_names_path() {
    let o = qflow(&["train", "--config", "/nonexistent/qflow.cfg"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("/nonexistent/qflow.cfg"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.seed = 1\nflow.speed = 2\n");
    let o = qflow(&["train", "--config", &cfg, "--out", &s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("flow.speed"));
}

#[test]
fn invalid_schedule_is_a_config_error() {
    let o = qflow(&["analyze", "variance", "-o", "flow.ode_dt=0.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("flow.ode_dt"));
}

#[test]
fn unknown_analysis_kind_lists_valid_kinds() {
    let o = qflow(&["analyze", "entropy"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("variance") && e.contains("monotonicity") && e.contains("correlation"), "{e}");
}

#[test]
fn train_writes_run_directory_and_reproduces_from_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let first = dir.path().join("first");
    let o = qflow(&["train", "--config", &cfg, "--override", "flow.eta=0.02", "--out", &s(&first)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let snapshot = fs::read_to_string(first.join("config.resolved")).unwrap();
    assert!(snapshot.lines().any(|l| l == "flow.eta = 0.02"), "{snapshot}");
    let metrics = fs::read_to_string(first.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), METRICS_HEADER.join(","));
    assert_eq!(metrics.lines().count(), 3);
    for step in [200, 400] {
        assert!(first.join(format!("ckpt_{step}/manifest.json")).exists());
    }

    let second = dir.path().join("second");
    let o = qflow(&["train", "--config", &s(&first.join("config.resolved")), "--out", &s(&second)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(second.join("metrics.csv")).unwrap(), metrics.as_bytes());
}

#[test]
fn eval_matches_in_memory_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_text(TINY, &[]).unwrap();
    let out = RunOutput {
        dir: dir.path().to_path_buf(),
        resolved_config: cfg.resolved(),
    };
    let (_, agent) = train_with_output(&cfg.train, Some(&out)).unwrap();
    let expected = evaluate(&agent, &cfg.train.env, 3, 11).unwrap();

    let ckpt = dir.path().join("ckpt_400");
    let (loaded, _) = Agent::load(&ckpt).unwrap();
    assert_eq!(evaluate(&loaded, &cfg.train.env, 3, 11).unwrap(), expected);
    let run = |out: &Path| {
        let o = qflow(&["eval", "--checkpoint", &s(&ckpt), "--episodes", "3", "--seed", "11", "--out", &s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        o.stdout
    };
    let a = run(&dir.path().join("e1"));
    let b = run(&dir.path().join("e2"));
    assert_eq!(a, b);
    let json: serde_json::Value = serde_json::from_slice(&a).unwrap();
    let returns: Vec<f64> = json["returns"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(returns, expected.returns);
    assert!(dir.path().join("e1/eval.json").exists());

}

#[test]
fn eval_rejects_zero_episodes_and_corrupt_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("manifest.json"), "{ broken").unwrap();
    let o = qflow(&["eval", "--checkpoint", &s(dir.path()), "--episodes", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = qflow(&["eval", "--checkpoint", &s(dir.path()), "--episodes", "2"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("manifest"), "{}", stderr(&o));
}

#[test]
fn variance_defaults_write_one_row_per_dim() {
    let dir = tempfile::tempdir().unwrap();
    let o = qflow(&["analyze", "variance", "--out", &s(dir.path()), "-o", "output.svg=true"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(dir.path().join("analysis/variance.csv")).unwrap();
    assert!(rdr.headers().unwrap().iter().any(|h| h == "loglog_slope"));
    assert_eq!(rdr.records().count(), 6);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("analysis/variance.json")).unwrap()).unwrap();
    assert!(json["loglog_slope"].is_f64());
    assert!(dir.path().join("analysis/variance.svg").exists());
}

#[test]
fn quadratic_monotonicity_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = qflow(&["analyze", "monotonicity", "--out", &s(dir.path()), "-o", "analysis.critic=quadratic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("analysis/monotonicity.json")).unwrap()).unwrap();
    assert_eq!(json["pass"], serde_json::Value::Bool(true));
}

#[test]
fn correlation_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = qflow(&["analyze", "correlation", "--out", &s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let o = qflow(&["analyze", "correlation", "--out", &s(dir.path()), "--checkpoint", "/nonexistent/ckpt"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn correlation_from_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    assert!(qflow(&["train", "--config", &cfg, "--out", &s(&run)]).status.success());
    let o = qflow(&[
        "analyze",
        "correlation",
        "--out",
        &s(dir.path()),
        "--checkpoint",
        &s(&run.join("ckpt_400")),
        "-o",
        "analysis.probe_states=4",
        "-o",
        "analysis.samples_per_state=200",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(dir.path().join("analysis/correlation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[2 + i].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn outdir_env_is_the_default_root() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_qflow"))
        .args(["analyze", "monotonicity", "-o", "analysis.critic=zero"])
        .env("QFLOW_OUTDIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("analysis/monotonicity.json").exists());
}

#[test]
fn nan_halt_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = qflow(&["train", "--config", &cfg, "--out", &s(dir.path()), "-o", "train.learning_rate=1e300"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(dir.path().join("nan_snapshot").exists());
}
