use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"preset = "rate-in-M"
cells = [[4, 2], [4, 4], [4, 8], [4, 16]]
horizon = 0.25
dt = 0.015625
replicas = 8
record_times = [0.125, 0.25]

[fp]
n_u = 60
u_max = 3.0

[checks]
dt_halving = false
fp_refinement = false
"#;

fn gridmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridmf")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("plan.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn rate_run_succeeds_and_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = gridmf(&["rate-m", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["errors.csv", "summary.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "preset = \"rate-in-M\"\nalpha = 1.5\n");
    let o = gridmf(&["rate-m", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = write_config(dir.path(), "preset = \"rate-in-M\"\nbogus = 1\n");
    let o = gridmf(&["rate-m", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn unwritable_output_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = gridmf(&["rate-m", "--config", &cfg, "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = |workers: &str| {
        let out = dir.path().join(format!("w{workers}"));
        let o = gridmf(&["empirical", "--config", &cfg, "--out", out.to_str().unwrap(), "--workers", workers]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let svg = std::fs::read_to_string(out.join("wasserstein.svg")).unwrap();
        assert_eq!(svg.matches("W1 at t = ").count(), 2);
        ["errors.csv", "wasserstein.csv"].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    assert_eq!(run("1"), run("8"));
}
