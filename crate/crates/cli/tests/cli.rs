use std::path::Path;
use std::process::{Command, Output};

fn crlsvi(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_crlsvi"));
    cmd.args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("RLSVI_")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn small_sweep(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec![
        "sweep",
        "--k",
        "3",
        "--h",
        "4",
        "--s",
        "3",
        "--a",
        "2",
        "--n-list",
        "1,2",
        "--instances",
        "2",
        "--out-dir",
        out,
    ];
    args.extend_from_slice(extra);
    crlsvi(&args, &[])
}

#[test]
fn sweep_writes_outputs_with_exact_headers() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_sweep(dir.path(), &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let instances = std::fs::read_to_string(dir.path().join("instances.csv")).unwrap();
    let mut lines = instances.lines();
    assert_eq!(
        lines.next().unwrap(),
        "mode,setting,n_agents,instance,seed,total_regret,per_agent_regret"
    );
    assert_eq!(lines.count(), 4);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(
        summary.lines().next().unwrap(),
        "mode,setting,n_agents,worst_case_total,worst_case_per_agent,fit_c,loglog_slope"
    );
    assert!(dir.path().join("summary.json").exists());
    assert!(dir.path().join("regret.svg").exists());
}

#[test]
fn sweep_output_does_not_depend_on_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(small_sweep(a.path(), &["--threads", "1"]).status.success());
    assert!(small_sweep(b.path(), &["--threads", "4"]).status.success());
    for f in ["instances.csv", "summary.csv", "regret.svg"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn invalid_config_exits_2_and_names_keys() {
    let out = crlsvi(
        &["sweep", "--s", "0", "--n-list", "5,2", "--instances", "0"],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for key in ["s:", "n:", "instances:"] {
        assert!(err.contains(key), "{err}");
    }
    let out = crlsvi(&["sweep", "--buffer", "bogus"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    std::fs::write(&file, "x").unwrap();
    let out = small_sweep(&file.join("sub"), &[]);
    assert_eq!(out.status.code(), Some(3));
    let out = crlsvi(&["sweep", "--config", "/definitely/not/here.json"], &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn flags_beat_env_beat_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"s": 3, "a": 2, "k": 2, "h": 3, "n": [1], "instances": 1}"#,
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let setting = |args: &[&str], env: &[(&str, &str)]| {
        let out_dir = dir.path().join("out");
        let mut all = vec![
            "sweep",
            "--config",
            cfg,
            "--out-dir",
            out_dir.to_str().unwrap(),
        ];
        all.extend_from_slice(args);
        let out = crlsvi(&all, env);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let csv = String::from_utf8(out.stdout).unwrap();
        csv.lines()
            .nth(1)
            .unwrap()
            .split(',')
            .nth(1)
            .unwrap()
            .to_string()
    };
    assert_eq!(setting(&[], &[]), "K=2;H=3;S=3;A=2");
    assert_eq!(setting(&[], &[("RLSVI_S", "4")]), "K=2;H=3;S=4;A=2");
    assert_eq!(
        setting(&["--s", "5"], &[("RLSVI_S", "4")]),
        "K=2;H=3;S=5;A=2"
    );
}

#[test]
fn single_runs_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let out = crlsvi(
        &[
            "finite",
            "--k",
            "3",
            "--h",
            "4",
            "--s",
            "2",
            "--a",
            "2",
            "--n-list",
            "2",
            "--trace",
            trace.to_str().unwrap(),
        ],
        &[],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["n_agents"], 2);
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 6);

    let out = crlsvi(
        &[
            "infinite",
            "--t",
            "40",
            "--s",
            "2",
            "--a",
            "2",
            "--eta",
            "0.9",
            "--n-list",
            "1,3",
            "--segmentations",
            "2",
        ],
        &[],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);

    let out = crlsvi(
        &[
            "finite",
            "--n-list",
            "1,2",
            "--trace",
            trace.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let mdp = dir.path().join("mdp.json");
    let out = crlsvi(
        &[
            "solve",
            "--sample",
            "--s",
            "3",
            "--a",
            "2",
            "--seed",
            "4",
            "--h",
            "3",
            "--save-mdp",
            mdp.to_str().unwrap(),
        ],
        &[],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let sampled: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let out = crlsvi(&["solve", "--mdp", mdp.to_str().unwrap(), "--h", "3"], &[]);
    let loaded: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(sampled, loaded);
    assert_eq!(loaded["v"].as_array().unwrap().len(), 4);

    let out = crlsvi(
        &["solve", "--mdp", mdp.to_str().unwrap(), "--eta", "0.9"],
        &[],
    );
    assert!(out.status.success());
    let out = crlsvi(&["solve", "--mdp", mdp.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));

    assert!(small_sweep(dir.path(), &[]).status.success());
    let svg = dir.path().join("again.svg");
    let out = crlsvi(
        &[
            "plot",
            "--summary",
            dir.path().join("summary.json").to_str().unwrap(),
            "-o",
            svg.to_str().unwrap(),
        ],
        &[],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        std::fs::read(&svg).unwrap(),
        std::fs::read(dir.path().join("regret.svg")).unwrap()
    );
}
