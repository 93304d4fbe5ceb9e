use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fisformer");

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg")
}

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(desk_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        stderr(o)
    );
}

/// First `MSE <x> MAE <y>` pair on the line starting with `prefix`.
fn metrics(text: &str, prefix: &str) -> (f64, f64) {
    let line = text
        .lines()
        .find(|l| l.starts_with(prefix))
        .expect("metric line");
    let words: Vec<&str> = line.split_whitespace().collect();
    let at = |w: &str| {
        let i = words.iter().position(|x| *x == w).unwrap();
        words[i + 1].parse::<f64>().unwrap()
    };
    (at("MSE"), at("MAE"))
}

#[test]
fn train_writes_checkpoint_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--set", "epochs=3"]);
    ok(&o);
    assert!(dir.path().join("model.fisf").exists());
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 3);
    assert!(history.starts_with("epoch,train_loss,val_mse,val_mae,seconds"));
}

#[test]
fn rerun_gives_identical_history_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&run(a.path(), &["train"]));
    let o = Command::new(BIN)
        .env("FISFORMER_THREADS", "1")
        .arg("--config")
        .arg(desk_config())
        .arg("--out")
        .arg(b.path())
        .arg("train")
        .output()
        .unwrap();
    ok(&o);
    for f in ["history.csv", "model.fisf"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_data_path_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["train", "--set", "data_path=/no/such/series.csv"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/series.csv"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--set", "learning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));
    let o = run(dir.path(), &["train", "--precision", "f16"]);
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(BIN)
        .env("FISFORMER_THREADS", "zero")
        .arg("bench")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--set", "lr=1e300"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn evaluate_reproduces_train_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let t = run(dir.path(), &["train"]);
    ok(&t);
    let e = run(dir.path(), &["evaluate"]);
    ok(&e);
    let (a, b) = (metrics(&stdout(&t), "val"), metrics(&stdout(&e), "val"));
    assert!(
        (a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9,
        "{a:?} vs {b:?}"
    );
    assert!(dir.path().join("metrics.csv").exists());
}

#[test]
fn f32_training_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let t = run(dir.path(), &["train", "--precision", "f32", "--seed", "3"]);
    ok(&t);
    let e = run(
        dir.path(),
        &["evaluate", "--precision", "f32", "--seed", "3"],
    );
    ok(&e);
    assert_eq!(metrics(&stdout(&t), "val"), metrics(&stdout(&e), "val"));
}

#[test]
fn corrupted_or_mismatched_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(dir.path(), &["train", "--set", "epochs=1"]));
    let path = dir.path().join("model.fisf");

    let o = run(dir.path(), &["evaluate", "--set", "horizon=5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("horizon"), "{}", stderr(&o));

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&path, bytes).unwrap();
    let o = run(dir.path(), &["evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn predict_writes_horizon_by_variates() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(dir.path(), &["train", "--set", "epochs=1"]));
    let input = dir.path().join("recent.csv");
    let mut text = String::from("date,a,b,c\n");
    for i in 0..20 {
        let t = i as f64;
        text.push_str(&format!(
            "2024-01-{:02},{},{},{}\n",
            i + 1,
            t.sin(),
            (0.5 * t).cos(),
            0.1 * t
        ));
    }
    std::fs::write(&input, text).unwrap();
    let o = run(dir.path(), &["predict", "--input", input.to_str().unwrap()]);
    ok(&o);
    let forecast = std::fs::read_to_string(dir.path().join("forecast.csv")).unwrap();
    let lines: Vec<&str> = forecast.lines().collect();
    assert_eq!(lines[0], "a,b,c");
    assert_eq!(lines.len(), 1 + 4);
    for l in &lines[1..] {
        let vals: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 3);
        assert!(vals.iter().all(|v| v.is_finite()));
    }

    let short = dir.path().join("short.csv");
    std::fs::write(&short, "a,b,c\n1,2,3\n").unwrap();
    let o = run(dir.path(), &["predict", "--input", short.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn csv_data_with_date_column_trains() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("series.csv");
    let mut text = String::from("date,x,y\n");
    for i in 0..300 {
        let t = i as f64;
        text.push_str(&format!("d{i},{},{}\n", (t / 10.0).sin(), (t / 7.0).cos()));
    }
    std::fs::write(&data, text).unwrap();
    let o = run(
        dir.path(),
        &[
            "train",
            "--set",
            &format!("data_path={}", data.display()),
            "--set",
            "epochs=1",
        ],
    );
    ok(&o);
    assert!(
        stdout(&o).contains("val series horizon 4"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn gradcheck_on_desk_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck", "--set", "gradcheck_samples=80"]);
    ok(&o);
    let text = stdout(&o);
    for g in [
        "embedding",
        "qkv_projection",
        "mf_centers",
        "mf_widths",
        "consequents",
        "layer_norm",
        "ffn",
        "projection",
    ] {
        assert!(text.contains(g), "{g} missing");
    }
    assert_eq!(text.matches("PASS").count(), 3);

    let o = run(
        dir.path(),
        &[
            "gradcheck",
            "--set",
            "gradcheck_samples=20",
            "--set",
            "gradcheck_tolerance=1e-30",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn trace_dump_respects_invariants() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(dir.path(), &["train", "--set", "epochs=1"]));
    ok(&run(dir.path(), &["trace", "--window", "3"]));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("trace.json")).unwrap())
            .unwrap();
    assert_eq!(doc["window"], 3);
    let blocks = doc["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 2);
    let as_f = |v: &serde_json::Value| v.as_f64().unwrap();
    for b in blocks {
        let pt = b["normalized_firing"].as_array().unwrap();
        let pi = b["firing_strength"].as_array().unwrap();
        assert_eq!(pt.len(), 3);
        for (ti, token) in pt.iter().enumerate() {
            for (fi, feat) in token.as_array().unwrap().iter().enumerate() {
                let rules = feat.as_array().unwrap();
                assert_eq!(rules.len(), 3);
                let s: f64 = rules.iter().map(as_f).sum();
                let raw: f64 = pi[ti][fi].as_array().unwrap().iter().map(as_f).sum();
                assert!(s <= 1.0 + 1e-12);
                assert!((s - raw / (raw + 1e-8)).abs() < 1e-12);
            }
        }
        let gate = b["gate"].as_array().unwrap();
        for j in 0..8 {
            let col: f64 = gate.iter().map(|row| as_f(&row[j])).sum();
            assert!((col - 1.0).abs() < 1e-6);
        }
        assert_eq!(b["interaction_map"].as_array().unwrap().len(), 3);
    }

    let o = run(dir.path(), &["trace", "--window", "100000"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_with_three_sizes_has_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["bench", "--set", "bench_d=16", "--set", "bench_repeats=5"],
    );
    ok(&o);
    let csv = std::fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for r in rows {
        let secs: f64 = r.split(',').nth(5).unwrap().parse().unwrap();
        assert!(secs > 0.0);
    }
}

#[test]
fn ablate_writes_paired_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["ablate", "--set", "epochs=1"]);
    ok(&o);
    assert!(stdout(&o).contains("Promotion"));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let a = std::fs::read_to_string(dir.path().join("history_fis.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("history_self_attention.csv")).unwrap();
    assert_eq!(a.lines().count(), b.lines().count());
}
