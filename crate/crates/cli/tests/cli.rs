use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use r2n2_core::data::read_case_set;
use r2n2_core::eval::EvalReport;
use r2n2_core::io::{read_field, read_image};
use r2n2_core::net::{load_checkpoint, save_checkpoint, Checkpoint, NetConfig, R2N2Net};
use r2n2_core::warp;

fn r2n2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r2n2"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) {
    let o = r2n2(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Every file under `dir`, relative path and bytes.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), read(&path)));
            }
        }
    }
    out.sort();
    out
}

/// Drops every `"seconds"` and `"speedup"`-style timing entry from JSON.
fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.retain(|k, _| !(k.contains("seconds") || k == "speedup"));
            m.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn json_without_timing(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&read(path)).unwrap();
    strip_timing(&mut v);
    v
}

fn metrics_without_timing(path: &Path) -> Vec<serde_json::Value> {
    String::from_utf8(read(path))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            strip_timing(&mut v);
            v
        })
        .collect()
}

const TINY_NET: &[&str] = &["--toy", "32", "--resolution", "16", "--steps", "2", "--no-noise"];

fn train_tiny(dir: &Path, iterations: &str) -> Output {
    let mut args = vec!["train", "--out-dir", p(dir), "--iterations", iterations];
    args.extend_from_slice(TINY_NET);
    r2n2(&args)
}

fn tiny_baseline_config(dir: &Path) -> PathBuf {
    let path = dir.join("baseline.toml");
    std::fs::write(
        &path,
        "[baseline]\nresolutions = [8, 16]\nkernel_sizes = [3, 7]\niterations_per_level = 30\n",
    )
    .unwrap();
    path
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&r2n2(&["--help"])), 0);
    assert_eq!(code(&r2n2(&["--version"])), 0);
    assert_eq!(code(&r2n2(&[])), 1);
    assert_eq!(code(&r2n2(&["synth", "--no-such-flag"])), 1);
    assert_eq!(code(&r2n2(&["frobnicate"])), 1);
}

#[test]
fn unknown_config_key_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "[train]\nlearnin_rate = 0.1\n").unwrap();
    let o = r2n2(&["train", "--config", p(&cfg), "--out-dir", p(&dir.path().join("run"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learnin_rate"), "{}", stderr(&o));
    let o = r2n2(&["synth", "--set", "bogus=1", "--out-dir", p(&dir.path().join("s"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn synth_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--count", "1", "--resolution", "32", "--seed", "5", "--out-dir", p(d)]);
    }
    // the snapshot records the output directory, everything else must match
    let outputs = |d: &Path| -> Vec<_> { tree(d).into_iter().filter(|(f, _)| f != Path::new("resolved_config.toml")).collect() };
    let ta = outputs(&a);
    assert!(ta.iter().any(|(f, _)| f.ends_with("fixed.png")));
    assert_eq!(ta, outputs(&b));
    // re-running in place leaves the bytes unchanged
    ok(&["synth", "--count", "1", "--resolution", "32", "--seed", "5", "--out-dir", p(&a)]);
    assert_eq!(ta, outputs(&a));
}

#[test]
fn synth_zero_count_writes_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    ok(&["synth", "--count", "0", "--out-dir", p(&out)]);
    let (manifest, cases) = read_case_set(&out.join("cases.toml")).unwrap();
    assert!(manifest.cases.is_empty() && cases.is_empty());
    assert!(tree(&out).iter().all(|(f, _)| f.components().count() == 1));
}

#[test]
fn synth_config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.toml");
    std::fs::write(&cfg, "count = 2\nresolution = 24\ndeform_scale = 0.0\n").unwrap();
    let out = dir.path().join("c");
    ok(&["synth", "--config", p(&cfg), "--count", "1", "--out-dir", p(&out)]);
    let (manifest, cases) = read_case_set(&out.join("cases.toml")).unwrap();
    assert_eq!((manifest.cases.len(), manifest.resolution), (1, 24));
    assert_eq!(cases[0].landmarks_fixed, cases[0].landmarks_moving);
    let snap = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(snap.contains("count = 1") && snap.contains("resolution = 24"), "{snap}");
}

#[test]
fn synth_unwritable_directory_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = r2n2(&["synth", "--count", "1", "--out-dir", p(&blocker.join("sub"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_writes_checkpoint_and_metrics_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train_tiny(&run, "10");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(run.join("checkpoint.r2nc").exists());
    assert!(run.join("resolved_config.toml").exists());
    let straight = metrics_without_timing(&run.join("metrics.jsonl"));
    assert_eq!(straight.len(), 10);

    let split = dir.path().join("split");
    ok(&train_args(&split, "4"));
    assert_eq!(load_checkpoint(&split.join("checkpoint.r2nc")).unwrap().iteration, 4);
    ok(&train_args(&split, "10"));
    assert_eq!(load_checkpoint(&split.join("checkpoint.r2nc")).unwrap().iteration, 10);
    assert_eq!(metrics_without_timing(&split.join("metrics.jsonl")), straight);
    assert_eq!(read(&split.join("checkpoint.r2nc")), read(&run.join("checkpoint.r2nc")));
}

fn train_args<'a>(dir: &'a Path, iterations: &'a str) -> Vec<&'a str> {
    let mut args = vec!["train", "--out-dir", p(dir), "--iterations", iterations];
    args.extend_from_slice(TINY_NET);
    args
}

#[test]
fn train_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = train_tiny(d, "3");
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(read(&a.join("checkpoint.r2nc")), read(&b.join("checkpoint.r2nc")));
    assert_eq!(metrics_without_timing(&a.join("metrics.jsonl")), metrics_without_timing(&b.join("metrics.jsonl")));
    // a finished run re-invoked does no more work
    let before = read(&a.join("metrics.jsonl"));
    assert_eq!(code(&train_tiny(&a, "3")), 0);
    assert_eq!(read(&a.join("metrics.jsonl")), before);
}

#[test]
fn train_rejects_checkpoint_from_another_network() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&train_tiny(&run, "1")), 0);
    let o = r2n2(&["train", "--out-dir", p(&run), "--toy", "16", "--resolution", "16", "--iterations", "2"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_divergence_exits_nonzero_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = train_args(&run, "5");
    args.extend_from_slice(&["--lambda", "1e308"]);
    let o = r2n2(&args);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    assert!(run.join("failure.json").exists());
}

#[test]
fn register_and_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let run = root.join("run");
    assert_eq!(code(&train_tiny(&run, "2")), 0);
    let ck = run.join("checkpoint.r2nc");
    let cases = root.join("cases");
    ok(&["synth", "--count", "2", "--resolution", "16", "--seed", "1", "--out-dir", p(&cases)]);
    let case0 = cases.join("case_000");
    let (fixed, moving) = (case0.join("fixed.png"), case0.join("moving.png"));

    // r2n2 with a one-step sequence
    let reg = root.join("reg");
    ok(&["register", "--fixed", p(&fixed), "--moving", p(&moving), "--checkpoint", p(&ck), "--steps", "1", "--out-dir", p(&reg)]);
    let table = std::fs::read_to_string(reg.join("params.csv")).unwrap();
    assert_eq!(table.lines().count(), 2, "{table}");
    // the written field reproduces the written warp
    let field = read_field(&reg.join("field.r2nf")).unwrap();
    let warped = read_image(&reg.join("warped.png")).unwrap();
    let again = warp(&read_image(&moving).unwrap(), &field).unwrap();
    let diff = again.values().iter().zip(warped.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-3, "{diff}");
    let reg2 = root.join("reg2");
    ok(&["register", "--fixed", p(&fixed), "--moving", p(&moving), "--checkpoint", p(&ck), "--steps", "1", "--out-dir", p(&reg2)]);
    for f in ["params.csv", "field.r2nf", "warped.png"] {
        assert_eq!(read(&reg.join(f)), read(&reg2.join(f)), "{f}");
    }
    assert_eq!(json_without_timing(&reg.join("diagnostics.json")), json_without_timing(&reg2.join("diagnostics.json")));

    // missing checkpoint for the network is a usage error
    let o = r2n2(&["register", "--fixed", p(&fixed), "--moving", p(&moving), "--out-dir", p(&root.join("x"))]);
    assert_eq!(code(&o), 1);

    // b-spline on identical images
    let cfg = tiny_baseline_config(root);
    let bs = root.join("bs");
    ok(&["register", "--method", "bspline", "--config", p(&cfg), "--fixed", p(&fixed), "--moving", p(&fixed), "--out-dir", p(&bs)]);
    let field = read_field(&bs.join("field.r2nf")).unwrap();
    assert!(field.max_magnitude() < 1e-6, "{}", field.max_magnitude());
    assert!(!bs.join("params.csv").exists());

    // evaluation on the same set, twice
    let (e1, e2) = (root.join("e1"), root.join("e2"));
    for e in [&e1, &e2] {
        ok(&["eval", "--config", p(&cfg), "--cases", p(&cases), "--checkpoint", p(&ck), "--steps", "2", "--timing-runs", "1", "--out-dir", p(e)]);
    }
    let report = EvalReport::from_json(&std::fs::read_to_string(e1.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.cases.len(), 2);
    assert_eq!(report.param_counts.sequence, 14);
    assert!(report.param_counts.ratio > 0.0);
    assert!(e1.join("tre.svg").exists());
    assert!(e1.join("case_000/r2n2_t02_quiver.svg").exists());
    assert!(e1.join("case_001/bspline_magnitude.png").exists());
    assert_eq!(json_without_timing(&e1.join("report.json")), json_without_timing(&e2.join("report.json")));
    for (f, bytes) in tree(&e1) {
        if f.extension().is_some_and(|x| x == "svg" || x == "png") && f != Path::new("tre.svg") {
            assert_eq!(bytes, read(&e2.join(&f)), "{}", f.display());
        }
    }

    // a single case directory works too; the wrong resolution does not
    ok(&["eval", "--config", p(&cfg), "--cases", p(&case0), "--checkpoint", p(&ck), "--steps", "1", "--timing-runs", "1", "--out-dir", p(&root.join("e3"))]);
    let big = root.join("big");
    ok(&["synth", "--count", "1", "--resolution", "32", "--out-dir", p(&big)]);
    let o = r2n2(&["eval", "--config", p(&cfg), "--cases", p(&big), "--checkpoint", p(&ck), "--out-dir", p(&root.join("e4"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = r2n2(&["eval", "--cases", p(&cases), "--out-dir", p(&root.join("e5"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_on_undeformed_cases_does_not_increase_tre() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // a network with all-zero weights emits zero displacement
    let ck = root.join("zero.r2nc");
    let net = R2N2Net::zeros(NetConfig::toy(16, 32)).unwrap();
    let checkpoint = Checkpoint {
        net,
        iteration: 0,
        auxiliary: Vec::new(),
        metadata: serde_json::json!({}),
    };
    save_checkpoint(&ck, &checkpoint).unwrap();
    let cases = root.join("cases");
    ok(&["synth", "--count", "2", "--resolution", "16", "--deform-scale", "0", "--out-dir", p(&cases)]);
    let cfg = tiny_baseline_config(root);
    let out = root.join("e");
    ok(&["eval", "--config", p(&cfg), "--cases", p(&cases), "--checkpoint", p(&ck), "--steps", "3", "--timing-runs", "1", "--out-dir", p(&out)]);
    let report = EvalReport::from_json(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for c in &report.cases {
        assert_eq!(c.before.mean, 0.0);
        assert!(c.r2n2.tre.mean <= c.before.mean);
        assert!(c.bspline.tre.mean <= c.before.mean + 1e-9);
    }
}
