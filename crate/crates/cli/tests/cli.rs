use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cnfem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cnfem")).args(args).output().expect("spawn cnfem")
}

fn write_pincers_config(dir: &Path) -> String {
    let path = dir.join("pincers.toml");
    fs::write(
        &path,
        "kind = \"pincers_illustration\"\neps2_values = [0.5]\n[domain]\nkind = \"pincers\"\nnx = 25\nny = 15\n\n[diagnostics]\nraster_cells_per_edge = 32\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn check_passes() {
    let out = cnfem(&["check"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("[PASS]")));
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = cnfem(&["model1", "--config", "/nonexistent/cnfem.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(cnfem(&["model3"]).status.code(), Some(2));
    assert_eq!(cnfem(&[]).status.code(), Some(2));
}

#[test]
fn kind_mismatch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_pincers_config(dir.path());
    assert_eq!(cnfem(&["model2", "--config", &config]).status.code(), Some(2));
}

#[test]
fn pincers_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_pincers_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = cnfem(&["pincers", "--config", &config, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in ["mesh.json", "pincers_state.json", "penalty_energy.csv", "pincers_diagnostics.json"] {
        assert!(names.iter().any(|x| x == n), "missing {n}");
    }
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?} differs");
    }
    let diag: serde_json::Value = serde_json::from_slice(&fs::read(a.join("pincers_diagnostics.json")).unwrap()).unwrap();
    assert!(diag["cn_gap"].as_f64().unwrap() > 0.0);
}
