//! End-to-end runs of the `meq` binary: files written, exit codes, and the
//! solve → verify round trip.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn meq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meq")).args(args).output().expect("spawn meq")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn solve_into(cfg: &str, dir: &Path) {
    let out = meq(&["solve", "--config", config(cfg).to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn verify(cfg: &str, dir: &Path) -> Output {
    meq(&["verify", "--config", config(cfg).to_str().unwrap(), "--solution", dir.to_str().unwrap()])
}

#[test]
fn solve_writes_policy_values_diagnostics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    solve_into("lq.toml", dir.path());
    for f in ["policy.csv", "values.csv", "diagnostics.csv", "manifest.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let policy = std::fs::read_to_string(dir.path().join("policy.csv")).unwrap();
    assert_eq!(policy.lines().next(), Some("t,node,state,control"));
    // two decision epochs of 121 nodes each
    assert_eq!(policy.lines().count(), 1 + 2 * 121);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "solve");
    assert_eq!(manifest["horizon"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn horizon_one_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("lq.toml")).unwrap().replace("horizon = 3", "horizon = 1");
    let cfg = dir.path().join("short.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = meq(&["solve", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizon"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("lq.toml")).unwrap() + "\nturbo = true\n";
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = meq(&["solve", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn mean_variance_solution_is_state_free_and_certifies() {
    let dir = tempfile::tempdir().unwrap();
    solve_into("mean_variance.toml", dir.path());
    let mut rdr = csv::Reader::from_path(dir.path().join("policy.csv")).unwrap();
    let mut by_t: std::collections::BTreeMap<u64, Vec<f64>> = Default::default();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        by_t.entry(rec[0].parse().unwrap()).or_default().push(rec[3].parse().unwrap());
    }
    assert_eq!(by_t.len(), 4);
    for us in by_t.values() {
        let (lo, hi) = us.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &u| (a.min(u), b.max(u)));
        assert!(hi - lo < 1e-6, "controls vary by {}", hi - lo);
    }

    let out = verify("mean_variance.toml", dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("certified"));
    assert!(dir.path().join("deviation.csv").is_file());
}

#[test]
fn a_perturbed_policy_is_not_certified() {
    let dir = tempfile::tempdir().unwrap();
    solve_into("lq.toml", dir.path());
    let path = dir.path().join("policy.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // push one node's control far from its best response
    let row: Vec<&str> = lines[60].split(',').collect();
    let moved = row[3].parse::<f64>().unwrap() + 2.0;
    lines[60] = format!("{},{},{},{moved}", row[0], row[1], row[2]);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();

    let out = verify("lq.toml", dir.path());
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("worst gap"));
}

#[test]
fn verify_without_values_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    solve_into("lq.toml", dir.path());
    std::fs::remove_file(dir.path().join("values.csv")).unwrap();
    assert_eq!(code(&verify("lq.toml", dir.path())), 2);
}

#[test]
fn compare_separates_the_three_policies_only_when_preferences_drift() {
    let dir = tempfile::tempdir().unwrap();
    let run = |cfg: &str| {
        let out_dir = dir.path().join(cfg);
        let out = meq(&["compare", "--config", config(cfg).to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("compare.csv").is_file());
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    assert!(run("lq.toml").contains("policies differ"));
    assert!(run("lq_time_consistent.toml").contains("policies identical"));
    // equilibrium and precommitment agree on this chain; only naive departs
    let chain = run("discrete_chain.toml");
    assert!(chain.contains("naive") && chain.contains("policies differ"), "{chain}");
    assert!(!chain.contains("equilibrium 1 vs precommitment"), "{chain}");
}

#[test]
fn chain_configs_solve_and_certify() {
    for cfg in ["discrete_chain.toml", "mean_variance_chain.toml"] {
        let dir = tempfile::tempdir().unwrap();
        solve_into(cfg, dir.path());
        assert_eq!(code(&verify(cfg, dir.path())), 0, "{cfg}");
    }
}
