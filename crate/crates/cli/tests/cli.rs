use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn dpfpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpfpl"))
        .args(args)
        .env_remove("DPFPL_CONFIG")
        .env_remove("DPFPL_OUT")
        .env_remove("DPFPL_SEED")
        .env_remove("DPFPL_THREADS")
        .output()
        .expect("binary runs")
}

fn minimal_config() -> serde_json::Value {
    serde_json::json!({
        "schema_version": 1,
        "protocol": {
            "clients": 2, "rounds": 3, "batch_size": 8,
            "lr_global": 0.01, "lr_local": 0.01, "temperature": 0.01
        },
        "privacy": { "epsilon": 1.0, "delta": 1e-5, "clip_threshold": 10.0, "noise": false }
    })
}

fn write_json(path: &Path, v: &serde_json::Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn stdout_path(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn minimal_run_is_fast_and_emits_three_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    write_json(&cfg, &minimal_config());
    let out = tmp.path().join("out");
    let start = Instant::now();
    let res = dpfpl(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let elapsed = start.elapsed();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(elapsed < Duration::from_secs(5), "{elapsed:?}");
    let dir = stdout_path(&res);
    let csv = fs::read_to_string(Path::new(&dir).join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(csv.starts_with("round,client,loss,local_acc,neighbor_acc,eps_spent,sigma_local,sigma_global\n"));
    assert!(Path::new(&dir).join("run.json").is_file());
}

#[test]
fn negative_epsilon_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = minimal_config();
    v["privacy"]["epsilon"] = serde_json::json!(-1.0);
    let cfg = tmp.path().join("c.json");
    write_json(&cfg, &v);
    let out = tmp.path().join("out");
    let res = dpfpl(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("privacy.epsilon"));
    assert!(!out.exists(), "nothing may be written before validation passes");

    let res = dpfpl(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn same_seed_gives_byte_identical_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = minimal_config();
    v["privacy"]["noise"] = serde_json::json!(true);
    let cfg = tmp.path().join("c.json");
    write_json(&cfg, &v);
    let out = tmp.path().join("out");
    let args = ["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9"];
    let a = dpfpl(&args);
    let b = dpfpl(&[&args[..], &["--threads", "1"]].concat());
    assert!(a.status.success() && b.status.success());
    let (da, db) = (stdout_path(&a), stdout_path(&b));
    assert_ne!(da, db, "reruns must not overwrite");
    assert_eq!(
        fs::read(Path::new(&da).join("metrics.csv")).unwrap(),
        fs::read(Path::new(&db).join("metrics.csv")).unwrap()
    );
}

#[test]
fn env_overrides_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    write_json(&cfg, &minimal_config());
    let out = tmp.path().join("envout");
    let res = Command::new(env!("CARGO_BIN_EXE_dpfpl"))
        .args(["run"])
        .env("DPFPL_CONFIG", &cfg)
        .env("DPFPL_OUT", &out)
        .env("DPFPL_SEED", "4")
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(stdout_path(&res).ends_with("-seed4"));
}

#[test]
fn sweep_summary_has_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let mut base = minimal_config();
    base["dims"] = serde_json::json!({
        "prompt_len": 2, "token_dim": 4, "class_token_dim": 3, "image_dim": 4, "num_classes": 4, "rank": 1
    });
    base["data"] = serde_json::json!({
        "per_class_count": 10, "noise_scale": 0.3, "mean_scale": 1.0,
        "split": {"scheme": "pathological", "classes_per_client": 2}
    });
    let grid = serde_json::json!({
        "schema_version": 1,
        "base": base,
        "variants": ["dp-fpl", "dp-fpl-no-residual"],
        "epsilons": [null, 0.4],
        "ranks": [1, 2],
        "seeds": [0, 1]
    });
    let path = tmp.path().join("grid.json");
    write_json(&path, &grid);
    let out = tmp.path().join("out");
    let res = dpfpl(&["sweep", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = fs::read_to_string(stdout_path(&res)).unwrap();
    assert_eq!(summary.lines().count(), 1 + 8);
    // two seeds per cell, so the std columns are populated
    for line in summary.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert!(!cols[6].is_empty(), "{line}");
    }
}

#[test]
fn mia_requires_target_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("mia.json");
    write_json(
        &cfg,
        &serde_json::json!({"schema_version": 1, "target": "nope/run.json", "shadows": 2}),
    );
    let res = dpfpl(&["mia", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("missing artifact"));
}

#[test]
fn mia_end_to_end_writes_valid_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = minimal_config();
    v["data"] = serde_json::json!({
        "per_class_count": 10, "noise_scale": 0.5, "mean_scale": 1.0,
        "split": {"scheme": "pathological", "classes_per_client": 2}
    });
    let cfg = tmp.path().join("c.json");
    write_json(&cfg, &v);
    let out = tmp.path().join("out");
    let res = dpfpl(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success());
    let run_json = Path::new(&stdout_path(&res)).join("run.json");
    let mia_cfg = tmp.path().join("mia.json");
    write_json(
        &mia_cfg,
        &serde_json::json!({"schema_version": 1, "target": run_json, "shadows": 2}),
    );
    let res = dpfpl(&["mia", "--config", mia_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(stdout_path(&res)).unwrap()).unwrap();
    dpfpl::harness::validate_report_json(&report).unwrap();
    assert!(report["epsilon"].is_null());
}
