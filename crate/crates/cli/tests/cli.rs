use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");

fn lwgr(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lwgr"))
        .args(args)
        .env("LWGR_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = lwgr(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn run_dir(base: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(base).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "expected one run directory in {}", base.display());
    dirs.pop().unwrap()
}

fn error_record(o: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&o.stderr);
    let v: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).expect("json error record");
    v["error"].clone()
}

fn pipeline(out: &Path) {
    for verb in ["gen-data", "fit-sids", "pretrain-lm", "pretrain-reference", "train"] {
        ok(out, &[verb, "-c", SMOKE]);
    }
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lwgr(tmp.path(), &["gen-data", "-c", SMOKE, "--set", "foo=1"]);
    assert!(!o.status.success());
    let e = error_record(&o);
    assert_eq!(e["kind"], "config");
    assert!(e["message"].as_str().unwrap().contains("foo"));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nfoo = 3\n").unwrap();
    let o = lwgr(tmp.path(), &["gen-data", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_record(&o)["message"].as_str().unwrap().contains("foo"));
}

#[test]
fn missing_artifact_names_the_expected_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lwgr(tmp.path(), &["train", "-c", SMOKE]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_record(&o);
    assert_eq!(e["kind"], "missing_artifact");
    assert!(e["path"].as_str().unwrap().ends_with("world.jsonl"));
}

#[test]
fn same_config_and_seed_give_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (da, db) = (run_dir(a.path()), run_dir(b.path()));
    assert_eq!(da.file_name(), db.file_name());
    for verb in ["gen-data", "fit-sids", "pretrain-lm", "pretrain-reference", "train"] {
        let name = format!("manifest-{verb}.json");
        let ma = std::fs::read_to_string(da.join(&name)).unwrap();
        let mb = std::fs::read_to_string(db.join(&name)).unwrap();
        assert_eq!(ma, mb, "{verb} outputs differ");
    }
}

#[test]
fn smoke_train_then_eval_writes_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path());
    ok(tmp.path(), &["eval", "-c", SMOKE]);
    ok(tmp.path(), &["eval", "-c", SMOKE, "--reference"]);
    let dir = run_dir(tmp.path());
    for file in ["metrics.csv", "metrics_reference.csv"] {
        let text = std::fs::read_to_string(dir.join(file)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("variant,metric,value,cohort,seed"));
        let rows: Vec<&str> = lines.collect();
        assert!(rows.iter().any(|r| r.contains(",recall@5,") && r.contains(",all,")));
        for r in rows {
            let v: f64 = r.split(',').nth(2).unwrap().parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let snapshot = std::fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(snapshot.contains("[train]"));
    let log = std::fs::read_to_string(dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss_rec,constraint,lambda,loss_total,grad_norm"));
}

#[test]
fn serve_sim_and_grad_check_run_on_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path());
    ok(tmp.path(), &["serve-sim", "-c", SMOKE]);
    ok(tmp.path(), &["grad-check", "-c", SMOKE, "--seeds", "2"]);
    let dir = run_dir(tmp.path());
    let traces = std::fs::read_to_string(dir.join("traces.jsonl")).unwrap();
    for line in traces.lines() {
        let t: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(t["llm_forward_count"], 0);
        assert_eq!(t["lookup_count"], 1);
    }
    let gc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("grad_check.json")).unwrap()).unwrap();
    assert_eq!(gc["pass"], true);
}

#[test]
fn overrides_change_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data", "-c", SMOKE]);
    ok(tmp.path(), &["gen-data", "-c", SMOKE, "--set", "seed=4"]);
    let n = std::fs::read_dir(tmp.path()).unwrap().count();
    assert_eq!(n, 2);
}
