//! End-to-end runs of the `twinmarl` binary.

use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

fn twinmarl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinmarl"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = twinmarl(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let cfg = r#"{
        "scenario": "coop",
        "seed": 5,
        "train": {"max_steps": 1024, "buffer_size": 256, "batch_size": 64, "hidden_units": 16, "num_layers": 2},
        "parallel": {"replicas": 2, "workers": 1},
        "evaluation": {"episodes": 2}
    }"#;
    let p = dir.join("tiny.json");
    fs::write(&p, cfg).unwrap();
    p.display().to_string()
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(twinmarl(d.path(), &["evaluate", "--bogus"]).status.code(), Some(2));
    assert_eq!(twinmarl(d.path(), &["--dr", "max", "evaluate", "--uniform"]).status.code(), Some(2));
    fs::write(d.path().join("bad.json"), r#"{"evaluation": {"episodes": "many"}}"#).unwrap();
    let out = twinmarl(d.path(), &["--config", "bad.json", "evaluate", "--uniform"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("evaluation.episodes"), "{err}");
    let out = twinmarl(d.path(), &["evaluate", "--checkpoint", "missing.ckpt", "--realm", "sim"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
    // imitation terms without a demonstration file
    assert_eq!(twinmarl(d.path(), &["--scenario", "race", "train", "--steps", "100"]).status.code(), Some(1));
    // randomized training needs one replica per grid point
    assert_eq!(twinmarl(d.path(), &["--dr", "ldr", "train", "--replicas", "3"]).status.code(), Some(1));
}

#[test]
fn manifest_rerun_reproduces_kpis_byte_for_byte() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    ok(d.path(), &["--config", &cfg, "evaluate", "--uniform", "--realm", "both", "--out", "a"]);
    ok(d.path(), &["--config", "a/manifest.json", "evaluate", "--uniform", "--realm", "both", "--out", "b"]);
    let a = fs::read(d.path().join("a/kpi.csv")).unwrap();
    assert_eq!(a, fs::read(d.path().join("b/kpi.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 + 2);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["command"], "evaluate");
    assert!(m["git_revision"].is_string());
}

#[test]
fn train_then_evaluate_the_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    ok(d.path(), &["--config", &cfg, "train", "--out", "run"]);
    let metrics = fs::read_to_string(d.path().join("run/metrics_p0.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4);
    assert!(d.path().join("run/checkpoints/policy0_final.ckpt").exists());
    ok(d.path(), &["--config", &cfg, "evaluate", "--checkpoint", "run", "--realm", "sim", "--out", "ev"]);
    let kpi = fs::read_to_string(d.path().join("ev/kpi.csv")).unwrap();
    assert!(kpi.lines().skip(1).all(|l| l.starts_with("coop,ndr,sim,")), "{kpi}");
}

#[test]
fn demo_recording_is_race_only() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["--scenario", "race", "demo-record", "--laps", "1", "--out", "demo/fgm.ndjson"]);
    let text = fs::read_to_string(d.path().join("demo/fgm.ndjson")).unwrap();
    assert!(text.lines().next().unwrap().contains("\"record\":\"header\""));
    assert!(d.path().join("demo/fgm.ndjson.manifest.json").exists());
    assert_eq!(twinmarl(d.path(), &["demo-record", "--out", "x.ndjson"]).status.code(), Some(1));
}

/// Hand-built records: quartiles and the gap are worked out below.
const FIXTURE: &str = "scenario,policy,realm,episode,agent,success,reward,duration
coop,p,sim,0,,1,1,100
coop,p,sim,1,,0,2,200
coop,p,sim,2,,1,4,300
coop,p,sim,3,,0,7,400
coop,p,twin,0,,0,2,100
coop,p,twin,1,,0,2,200
coop,p,twin,2,,1,4,300
coop,p,twin,3,,1,8,400
";

#[test]
fn report_on_a_hand_fixture() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("kpi.csv"), FIXTURE).unwrap();
    let stdout = ok(d.path(), &["report", "kpi.csv", "--out", "rep"]);
    let summary = fs::read_to_string(d.path().join("rep/summary.csv")).unwrap();
    // sim reward [1, 2, 4, 7]: h = 3p, q1 = 1.75, median 3, q3 = 4.75, mean 3.5
    assert!(summary.contains("p,sim,reward,,4,3.5,3,1.75,4.75,1,7"), "{summary}");
    // gap: success 0.5 vs 0.5 -> 0; reward 3.5 vs 4 -> 1/7; duration equal -> 0
    let gap = fs::read_to_string(d.path().join("rep/gap.csv")).unwrap();
    let value: f64 = gap.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((value - 100.0 / 21.0).abs() < 1e-9, "{gap}");
    assert!(stdout.contains("sim-to-twin gap p: 4.76%"), "{stdout}");
    assert!(d.path().join("rep/plot_kpis.gp").exists());

    let mixed = FIXTURE.to_string() + "race,q,sim,0,0,1,1,1\n";
    fs::write(d.path().join("mixed.csv"), mixed).unwrap();
    let out = twinmarl(d.path(), &["report", "mixed.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mix"));
}

#[test]
fn benchmark_writes_a_scaling_table() {
    let d = tempfile::tempdir().unwrap();
    let stdout = ok(d.path(), &["benchmark-parallel", "--k", "1,2", "--budget", "2000", "--out", "b"]);
    let csv = fs::read_to_string(d.path().join("b/scaling_coop_environments.csv")).unwrap();
    assert_eq!(csv, stdout);
    assert_eq!(csv.lines().count(), 3);
    let out = ok(d.path(), &["benchmark-parallel", "--k", "1,2", "--budget", "400", "--mode", "instances", "--out", "c"]);
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn separate_server_and_plant_processes() {
    let d = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port().to_string();
    let server = Command::new(env!("CARGO_BIN_EXE_twinmarl"))
        .current_dir(d.path())
        .env("RUST_LOG", "warn")
        .args(["evaluate", "--uniform", "--realm", "twin", "--episodes", "2", "--out", "srv", "--listen"])
        .arg(format!("127.0.0.1:{port}"))
        .spawn()
        .unwrap();
    let plant = ok(d.path(), &["twin-emulate", "--connect", &format!("127.0.0.1:{port}"), "--out", "plant", "--log", "plant.csv"]);
    let status = server.wait_with_output().unwrap().status;
    assert!(status.success());
    let report: serde_json::Value = serde_json::from_str(&plant).unwrap();
    assert_eq!(report["episodes"], 2);
    let kpi = fs::read_to_string(d.path().join("srv/kpi.csv")).unwrap();
    assert_eq!(kpi.lines().count(), 3);
    assert!(fs::read_to_string(d.path().join("plant.csv")).unwrap().lines().count() > 2);
}
