use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vsplit"))
}

fn iris() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/iris.csv")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn vsplit")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// One 512-bit key pair shared by the tests in this binary.
fn test_key() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    let dir = DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("k");
        let o = run(&["keygen", "--bits", "512", "--seed", "9", "--out", prefix.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        dir
    });
    static KEY: OnceLock<PathBuf> = OnceLock::new();
    KEY.get_or_init(|| dir.path().join("k.key"))
}

/// The deterministic records of a report: everything except timing and the
/// transcript digest.
fn metric_records(jsonl: &str) -> Vec<Value> {
    jsonl
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| matches!(v["record"].as_str(), Some("run" | "epoch" | "final" | "ops")))
        .collect()
}

fn record<'a>(records: &'a [Value], kind: &str) -> &'a Value {
    records.iter().find(|v| v["record"] == kind).unwrap_or_else(|| panic!("no {kind} record"))
}

fn short_iris(extra: &[&str]) -> Vec<String> {
    let key = test_key().to_str().unwrap().to_string();
    let mut args: Vec<String> = ["train", "--dataset", iris().to_str().unwrap(), "--epochs", "2", "--seed", "3", "--hidden", "4", "--key", &key]
        .iter()
        .map(|s| s.to_string())
        .collect();
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

fn run_owned(args: &[String]) -> Output {
    bin().args(args).output().expect("spawn vsplit")
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let o = run(&[flag]);
        assert_eq!(o.status.code(), Some(0), "{flag}");
        assert!(!o.stdout.is_empty());
    }
    let o = run(&["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    for flag in ["--role", "--noise-blind", "--listen", "--connect", "--config", "--record-noise"] {
        assert!(stdout(&o).contains(flag), "help lacks {flag}");
    }
}

#[test]
fn malformed_flags_are_usage_errors() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--role", "sideways"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--role", "local", "--epochs", "many"]).status.code(), Some(1));
}

#[test]
fn keygen_writes_an_owner_only_private_key() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("node");
    let o = run(&["keygen", "--bits", "512", "--out", prefix.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["bits"], 512);
    let (public, private) = (dir.path().join("node.pub"), dir.path().join("node.key"));
    assert!(public.is_file() && private.is_file());
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        assert_eq!(std::fs::metadata(&private).unwrap().permissions().mode() & 0o777, 0o600);
    }
    let pub_bytes = std::fs::read(&public).unwrap();
    let key_bytes = std::fs::read(&private).unwrap();
    assert_ne!(pub_bytes, key_bytes);

    let again = run(&["keygen", "--bits", "512", "--out", prefix.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(2), "must not clobber keys without --force");
    assert_eq!(std::fs::read(&private).unwrap(), key_bytes);
}

#[test]
fn keygen_rejects_bad_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["keygen", "--bits", "511", "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validation_reports_every_problem() {
    let o = run(&["train", "--role", "passive", "--lr=-1", "--batch-size", "0", "--frac-bits", "40", "--test-fraction", "1.5", "--save", "m.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for needle in ["no dataset", "learning rate", "batch size", "fraction bits", "--test-fraction", "--listen", "--save"] {
        assert!(err.contains(needle), "missing {needle:?} in:\n{err}");
    }
}

#[test]
fn small_generated_keys_need_the_test_flag() {
    let iris = iris();
    let o = run(&["train", "--role", "local", "--dataset", iris.to_str().unwrap(), "--key-bits", "512"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--test-keys"));
}

#[test]
fn active_without_a_peer_fails_with_a_connection_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut args = short_iris(&["--role", "active", "--connect-timeout", "0.5"]);
    args.extend(["--connect".to_string(), format!("127.0.0.1:{port}")]);
    let o = run_owned(&args);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("error:"));
    assert!(o.stdout.is_empty());
}

#[test]
fn local_runs_are_reproducible() {
    let args = short_iris(&["--role", "local"]);
    let (a, b) = (run_owned(&args), run_owned(&args));
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(b.status.success(), "{}", stderr(&b));
    let (ra, rb) = (metric_records(&stdout(&a)), metric_records(&stdout(&b)));
    assert_eq!(ra, rb);
    assert_eq!(ra.iter().filter(|v| v["record"] == "epoch").count(), 2);
    assert_eq!(record(&ra, "run")["kind"], "protocol");
    assert!(record(&ra, "ops")["encrypt"].as_u64().unwrap() > 0);
}

#[test]
fn config_file_fills_in_unset_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[model]\nepochs = 3\nlr = 0.05\nhidden = [5]\nbias = false\n\n[protocol]\nbaseline = \"float\"\n").unwrap();
    let args = short_iris(&["--role", "local", "--config", cfg.to_str().unwrap()]);
    // --epochs 2 on the command line wins over the file's 3.
    let o = run_owned(&args.into_iter().filter(|a| a != "--key" && !a.ends_with(".key")).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    let records = metric_records(&stdout(&o));
    let header = record(&records, "run");
    assert_eq!(header["kind"], "centralized-float");
    assert_eq!(header["config"]["hyperparams"]["epochs"], 2);
    assert_eq!(header["config"]["hyperparams"]["lr"], 0.05);
    assert_eq!(header["config"]["arch"]["hidden"], serde_json::json!([4]));
    assert_eq!(header["config"]["arch"]["bias"], false);

    std::fs::write(&cfg, "[model]\nepoch = 3\n").unwrap();
    let o = run(&["train", "--role", "local", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "unknown keys are config errors");
}

#[test]
fn saved_checkpoints_evaluate_to_the_reported_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let report = dir.path().join("r.jsonl");
    let args = short_iris(&["--role", "local", "--save", ckpt.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    let o = run_owned(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&report).unwrap(), stdout(&o));
    let trained = record(&metric_records(&stdout(&o)), "final")["test_accuracy"].as_f64().unwrap();

    let o = run(&["eval", "--model", ckpt.to_str().unwrap(), "--dataset", iris().to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(eval["arithmetic"], "fixed");
    assert_eq!(eval["rows"], 30);
    assert_eq!(eval["accuracy"].as_f64().unwrap(), trained);
}

#[test]
fn two_processes_match_the_local_run() {
    let local = run_owned(&short_iris(&["--role", "local"]));
    assert!(local.status.success(), "{}", stderr(&local));

    let passive_args: Vec<String> =
        ["train", "--role", "passive", "--dataset", iris().to_str().unwrap(), "--epochs", "2", "--seed", "3", "--hidden", "4", "--listen", "127.0.0.1:0"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    let mut passive = bin().args(&passive_args).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
    let mut err = BufReader::new(passive.stderr.take().unwrap());
    let addr = loop {
        let mut line = String::new();
        assert!(err.read_line(&mut line).unwrap() > 0, "passive exited before listening");
        if let Some(a) = line.trim().strip_prefix("listening on ") {
            break a.to_string();
        }
    };
    let mut active_args = short_iris(&["--role", "active"]);
    active_args.extend(["--connect".to_string(), addr]);
    let active = run_owned(&active_args);
    let passive = passive.wait_with_output().unwrap();
    assert!(active.status.success(), "{}", stderr(&active));
    assert!(passive.status.success());

    let (l, a) = (metric_records(&stdout(&local)), metric_records(&stdout(&active)));
    assert_eq!(record(&l, "final"), record(&a, "final"));
    let epochs = |r: &[Value]| r.iter().filter(|v| v["record"] == "epoch").cloned().collect::<Vec<_>>();
    assert_eq!(epochs(&l), epochs(&a));
    let summary: Value = serde_json::from_str(stdout(&passive).trim()).unwrap();
    assert_eq!(summary["kind"], "protocol-passive");
    assert!(summary["run"]["ops"]["mul_plain"].as_u64().unwrap() > 0);
}

#[test]
fn audit_passes_with_noise_and_fails_without() {
    let dir = tempfile::tempdir().unwrap();
    let key = test_key().to_str().unwrap().to_string();
    let audit = |noise: bool| -> Output {
        let t = dir.path().join(format!("t{noise}.bin"));
        let n = dir.path().join(format!("n{noise}.jsonl"));
        let mut extra = vec!["--role", "local", "--epochs", "1", "--transcript", t.to_str().unwrap(), "--record-noise", n.to_str().unwrap()];
        if !noise {
            extra.push("--no-noise");
        }
        let mut args = short_iris(&extra);
        let at = args.iter().position(|a| a == "--epochs").unwrap();
        args.drain(at..at + 2);
        let o = run_owned(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        run(&["audit", "--transcript", t.to_str().unwrap(), "--key", &key, "--noise", n.to_str().unwrap()])
    };
    let good = audit(true);
    assert_eq!(good.status.code(), Some(0), "{}", stderr(&good));
    let report: Value = serde_json::from_str(stdout(&good).trim()).unwrap();
    assert_eq!(report["blinding_verified"], true);
    assert!(report["crossing"].as_u64().unwrap() > 0);

    let bad = audit(false);
    assert_eq!(bad.status.code(), Some(4));
    assert!(stderr(&bad).contains("offending frames"));
}

#[test]
fn bench_writes_a_gnuplot_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("sweep.dat");
    let key = test_key().to_str().unwrap();
    let o = run(&["bench", "--dims", "2,8", "--hidden", "3", "--classes", "2", "--trials", "1", "--key", key, "--gnuplot", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert!(stdout(&o).lines().count() >= 2);
}

#[test]
fn documented_iris_example_reaches_target_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("iris.jsonl");
    let o = bin()
        .current_dir(dir.path())
        .args(["train", "--role", "local", "--dataset", iris().to_str().unwrap(), "--epochs", "200", "--seed", "7"])
        .args(["--key-bits", "512", "--test-keys", "--report", report.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let records = metric_records(&std::fs::read_to_string(&report).unwrap());
    let acc = record(&records, "final")["test_accuracy"].as_f64().unwrap();
    assert!(acc >= 0.95, "test accuracy {acc}");
    assert_eq!(metric_records(&stdout(&o)), records);
}
