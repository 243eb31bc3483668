use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pigse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pigse")).args(args).output().expect("binary runs")
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stages_compose_on_a_fresh_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let cfg = smoke_config();
    for args in [
        vec!["generate", "--config", cfg.to_str().unwrap(), "--out", out, "--workers", "2"],
        vec!["dse", "--out", out],
        vec!["train", "--out", out],
        vec!["eval", "--out", out],
        vec!["report", "--out", out, "--csv", "--plot-data"],
    ] {
        let o = pigse(&args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        assert_eq!(stderr(&o).lines().count(), 1, "{args:?} prints a one-line summary");
    }
    let csv = String::from_utf8(pigse(&["report", "--out", out, "--csv"]).stdout).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    let manifest = std::fs::read_to_string(Path::new(out).join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seeds\"") && manifest.contains("\"config_digest\""));

    let dump = pigse(&["dataset", "dump", "--out", out, "--csv", "--split", "test", "--sample", "0"]);
    assert!(dump.status.success(), "{}", stderr(&dump));
    let text = String::from_utf8(dump.stdout).unwrap();
    assert!(text.starts_with("split,sample,frame"));
    assert!(text.lines().skip(1).all(|l| l.starts_with("test,0,")));
}

#[test]
fn eval_without_checkpoint_exits_3_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = smoke_config();
    assert!(pigse(&["generate", "--config", cfg.to_str().unwrap(), "--out", out]).status.success());
    assert!(pigse(&["dse", "--out", out]).status.success());
    let o = pigse(&["eval", "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("mlp_run1.ckpt"), "{}", stderr(&o));
}

#[test]
fn unknown_command_exits_2() {
    assert_eq!(pigse(&["calibrate"]).status.code(), Some(2));
}

#[test]
fn invalid_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "runs": 0 }"#).unwrap();
    let o = pigse(&["generate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let o = pigse(&["gradcheck", "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 4);
    assert!(stderr(&o).starts_with("max relative error"));
}

#[test]
fn dse_run_filters_a_simulated_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("sample.traj");
    let csv = dir.path().join("branch.csv");
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    assert!(pigse(&["simulate", "--config", cfg, "--index", "1", "--out", traj.to_str().unwrap()]).status.success());
    let o = pigse(&[
        "dse", "run", "--trajectory", traj.to_str().unwrap(), "--branch", "2,3", "--config", cfg, "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.lines().next().unwrap().ends_with(",voltage_mse"));
    let mse: Vec<f64> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(mse.iter().all(|&m| m < 8e-3));

    let o = pigse(&["dse", "run", "--trajectory", traj.to_str().unwrap(), "--branch", "0,3", "--config", cfg]);
    assert_eq!(o.status.code(), Some(3));
}
