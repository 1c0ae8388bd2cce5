use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bubble(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bubble")).args(args).output().expect("spawn bubble")
}

fn bubble_with_threads(threads: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bubble"))
        .env("BUBBLE_THREADS", threads)
        .args(args)
        .output()
        .expect("spawn bubble")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_run(out: &Path, extra: &[&str]) -> Output {
    let dir = out.to_str().unwrap();
    let mut args = vec!["run", "--preset", "Default", "--paths", "2000", "--steps", "50", "--out", dir];
    args.extend_from_slice(extra);
    bubble(&args)
}

#[test]
fn presets_lists_all_five() {
    let o = bubble(&["presets"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["Default", "BigBubble", "NoBubble", "FearExo", "LowImpact"] {
        assert!(text.contains(name), "{name} missing from\n{text}");
    }
}

#[test]
fn run_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_run(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["flows.csv", "stats.csv", "paths.csv", "report.json", "residuals.log", "coefficients.json", "plots.svg"] {
        assert!(dir.path().join(f).is_file(), "{f} not written");
    }
    let flows = fs::read_to_string(dir.path().join("flows.csv")).unwrap();
    assert_eq!(flows.lines().next(), Some("t,theta_bar,mu_bar,zeta_t"));
    assert_eq!(flows.lines().count(), 52);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
    assert!(report["objective"]["se"].as_f64().unwrap() > 0.0);
    let paths = fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    assert_eq!(paths.lines().next(), Some("path_id,branch,t,x,a,p,v"));
    assert!(stdout(&o).contains("converged"));
}

#[test]
fn non_convergence_exits_two_and_still_writes() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_run(dir.path(), &["--max-iter", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(dir.path().join("flows.csv").is_file());
    assert!(stdout(&o).contains("NOT converged"));
}

#[test]
fn bad_inputs_exit_one() {
    let o = bubble(&["run", "--preset", "NoSuchPreset"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.toml");
    fs::write(&file, "kappa = 0.5\nnot_a_key = 3\n").unwrap();
    let o = bubble(&["run", "--scenario", file.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    fs::write(&file, "kappa = -1.0\n").unwrap();
    let o = bubble(&["run", "--scenario", file.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn scenario_file_overrides_preset_values() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("s.toml");
    fs::write(&file, "preset = \"Default\"\nname = \"custom\"\nk = 5.0\nn_paths = 2000\nn_steps = 50\n").unwrap();
    let out = dir.path().join("out");
    let o = bubble(&["run", "--scenario", file.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["scenario"], "custom");
    assert_eq!(report["n_paths"], 2000);
}

#[test]
fn flows_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |d: &Path| vec!["run".to_string(), "--paths".into(), "2000".into(), "--steps".into(), "50".into(), "--out".into(), d.to_str().unwrap().into()];
    let run = |threads: &str, d: &Path| {
        let args = args(d);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        bubble_with_threads(threads, &refs)
    };
    assert!(run("1", a.path()).status.success());
    assert!(run("8", b.path()).status.success());
    assert_eq!(fs::read(a.path().join("flows.csv")).unwrap(), fs::read(b.path().join("flows.csv")).unwrap());
}

#[test]
fn sweep_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = bubble(&[
        "sweep", "--preset", "Default", "--paths", "1000", "--steps", "40", "--param", "k", "--values", "0.5,5", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(dir.path().join("k=0.5").join("flows.csv").is_file());
    assert!(dir.path().join("sweep_flows.csv").is_file());
}

#[test]
fn validate_quick_passes() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("v.json");
    let o = bubble(&["validate", "--out", json.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert!(rows.as_array().unwrap().iter().all(|r| r["pass"] == true));
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn rejects_zero_threads() {
    let o = bubble(&["--threads", "0", "presets"]);
    assert_eq!(o.status.code(), Some(1));
}
