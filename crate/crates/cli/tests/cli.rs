use std::process::Command;

fn etmpc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_etmpc"))
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = etmpc()
        .args(["run", "--preset", "toy-1d", "--iterations", "1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("# etmpc schema="));
    assert_eq!(summary.lines().count(), 3);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn config_file_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.toml");
    let toml = etmpc::config::RunConfig::preset("toy-1d").unwrap().to_toml();
    std::fs::write(&cfg, toml).unwrap();
    let out_dir = dir.path().join("out");
    let out = etmpc()
        .args(["run", "--iterations", "1", "--seed", "3", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn verify_reports_each_suite() {
    let out = etmpc().args(["verify", "--suite", "int-out-duality", "--suite", "safety-game"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("int-out-duality") && text.contains("safety-game"));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "name = 'x'\n").unwrap();
    let out = etmpc().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn synth_exports_cells() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cells.csv");
    let out = etmpc().args(["synth", "--preset", "toy-1d", "--out"]).arg(&path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(&path).unwrap().lines().count() > 10);
}
