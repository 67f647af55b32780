use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_liftprune"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.json");
    let cfg = serde_json::json!({
        "data": { "source": { "kind": "fixture", "spec": { "images_per_class": 40 } } },
        "train": { "epochs": 8 },
        "prune": { "config": { "train": { "epochs": 1 } } },
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

struct Trained {
    _dir: tempfile::TempDir,
    config: PathBuf,
    model: PathBuf,
}

/// One small model trained through the CLI and shared by the tests.
fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let out = dir.path().join("train");
        run(&["-c", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "train"]);
        Trained {
            model: out.join("model.lpm"),
            config,
            _dir: dir,
        }
    })
}

fn run_on_model(command: &[&str], out: &Path) -> Output {
    let t = trained();
    let mut args = vec![
        "-c",
        t.config.to_str().unwrap(),
        "--model",
        t.model.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ];
    args.extend(command);
    run(&args)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = run(&["--print-config", "--seed", "5", "--set", "wsq.bits=4", "train"]).stdout;
    let path = dir.path().join("printed.json");
    std::fs::write(&path, &first).unwrap();
    let second = run(&["--print-config", "-c", path.to_str().unwrap(), "train"]).stdout;
    assert_eq!(first, second);
    let v: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["wsq"]["bits"], 4);
    assert_eq!(v["train"]["seed"], 5);
}

#[test]
fn unknown_key_fails_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"prune": {"config": {"rounds": 3}}}"#).unwrap();
    let out = bin().args(["-c", path.to_str().unwrap(), "prune"]).output().unwrap();
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["module"], "config");
    assert_eq!(err["code"], "InvalidConfig");
    assert!(err["message"].as_str().unwrap().contains("rounds"));
}

#[test]
fn missing_model_is_a_library_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--model", "/nonexistent/model.lpm", "--out-dir", dir.path().to_str().unwrap(), "profile"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["code"], "Io");
}

#[test]
fn profile_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    run_on_model(&["profile"], dir.path());
    let model = liftprune::net::load_model(&trained().model).unwrap();
    let p = liftprune::profiler::profile_cost(&model, &model.input_shape, None).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("profile.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer_id,kind,macs,nps"));
    for (line, l) in lines.zip(&p.layers) {
        assert_eq!(line, format!("{},{},{},{}", l.id, l.kind, l.macs, l.nps));
    }
    let totals = &read_json(&dir.path().join("profile.json"))["totals"];
    assert_eq!(totals["total_flops"], 2 * p.total_macs);
}

#[test]
fn prune_by_nps_for_three_rounds_reports_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    run_on_model(&["prune", "--criteria", "nps", "--rounds", "3"], dir.path());
    let csv = std::fs::read_to_string(dir.path().join("prune_report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("0,baseline,"));
    assert!(rows[1..].iter().all(|r| r.split(',').nth(1) == Some("nps")));
    for f in ["mask.json", "model.lpm", "accuracy_vs_nps.csv", "accuracy_vs_macs.csv", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    // the mask written by prune is accepted by profile
    let masked = dir.path().join("masked");
    run_on_model(&["profile", "--mask", dir.path().join("mask.json").to_str().unwrap()], &masked);
    let a = read_json(&masked.join("profile.json"))["totals"]["total_nps"].as_u64().unwrap();
    let last: u64 = rows[3].split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(a, last);
}

fn without_timestamp(path: &Path) -> Value {
    let mut v = read_json(path);
    v.as_object_mut().unwrap().remove("timestamp").expect("timestamp present");
    v
}

#[test]
fn same_config_and_seed_give_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_on_model(&["--seed", "3", "quantize-ws", "--bits", "2"], &a);
    run_on_model(&["--seed", "3", "quantize-ws", "--bits", "2"], &b);
    let ma = without_timestamp(&a.join("manifest.json"));
    assert_eq!(ma, without_timestamp(&b.join("manifest.json")));
    assert_eq!(ma["seed"], 3);
    let inputs = ma["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 1);
    assert_eq!(inputs[0]["sha256"].as_str().unwrap().len(), 64);
    assert!(ma["outputs"].as_array().unwrap().iter().any(|o| o["path"] == "codebooks.json"));
}

#[test]
fn remaining_commands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    run_on_model(&["attribute"], &d("attr"));
    let imp = read_json(&d("attr").join("importances.json"));
    assert_eq!(imp["layers"].as_object().unwrap().len(), 4);

    run_on_model(&["sensitivity"], &d("sens"));
    assert!(d("sens").join("sensitivity.csv").exists());

    run_on_model(&["quantize-ws", "--criteria", "mse"], &d("mse"));
    run_on_model(&["quantize-ws", "--criteria", "dwmse"], &d("dwmse"));
    let books = read_json(&d("mse").join("codebooks.json"));
    let book = liftprune::wsq::Codebook::from_json(&books[0]).unwrap();
    assert!(book.centroids.len() <= 8);

    run_on_model(&["quantize-int", "--coarse-iterations", "2"], &d("mpq"));
    let qc = read_json(&d("mpq").join("quant_config.json"));
    assert_eq!(qc["layers"].as_array().unwrap().len(), 4);
    assert!(std::fs::read_to_string(d("mpq").join("cb_report.csv")).unwrap().starts_with("step,stage,"));

    run_on_model(&["prune", "--mode", "local"], &d("local"));
    let amount = std::fs::read_to_string(d("local").join("accuracy_vs_amount.csv")).unwrap();
    assert_eq!(amount.lines().count(), 1 + 2 * 3);

    let label = |l: &str, p: PathBuf| format!("{l}={}", p.display());
    run_on_model(
        &[
            "report",
            &label("mse", d("mse").join("wsq_report.json")),
            &label("dwmse", d("dwmse").join("wsq_report.json")),
            &label("mpq", d("mpq").join("mpq_report.json")),
            &label("sweep", d("local").join("sweep.json")),
            "--set",
            &format!(r#"report.per_class=[{{"label":"float","path":"{}"}}]"#, trained().model.display()),
        ],
        &d("report"),
    );
    let bits = std::fs::read_to_string(d("report").join("accuracy_vs_bits.csv")).unwrap();
    let labels: Vec<&str> = bits.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["mse", "dwmse"]);
    let per_class = std::fs::read_to_string(d("report").join("per_class.csv")).unwrap();
    assert_eq!(per_class.lines().next(), Some("label,class_0,class_1,class_2,class_3"));
    assert!(d("report").join("accuracy_vs_amount.csv").exists());
    assert!(d("report").join("accuracy_vs_cb.csv").exists());
}

#[test]
fn report_rejects_unknown_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.json");
    std::fs::write(&path, r#"{"kind": "mystery"}"#).unwrap();
    let out = bin()
        .args(["--out-dir", dir.path().to_str().unwrap(), "report", &format!("x={}", path.display())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["code"], "InvalidConfig");
}

#[test]
fn idx_data_source_is_read_and_hashed() {
    let dir = tempfile::tempdir().unwrap();
    let images = |n: u32, seed: u8| {
        let mut b = Vec::new();
        for v in [0x0803u32, n, 4, 4] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..n * 16).map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed)));
        b
    };
    let labels = |n: u32| {
        let mut b = Vec::new();
        for v in [0x0801u32, n] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..n).map(|i| (i % 2) as u8));
        b
    };
    let p = |n: &str| dir.path().join(n);
    std::fs::write(p("tri"), images(12, 1)).unwrap();
    std::fs::write(p("trl"), labels(12)).unwrap();
    std::fs::write(p("tei"), images(6, 2)).unwrap();
    std::fs::write(p("tel"), labels(6)).unwrap();
    let cfg = serde_json::json!({
        "data": { "source": { "kind": "idx",
            "train_images": p("tri"), "train_labels": p("trl"),
            "test_images": p("tei"), "test_labels": p("tel") } },
        "train": { "epochs": 1 },
    });
    std::fs::write(p("cfg.json"), cfg.to_string()).unwrap();
    run(&["-c", p("cfg.json").to_str().unwrap(), "--out-dir", p("out").to_str().unwrap(), "train"]);
    let m = read_json(&p("out").join("manifest.json"));
    assert_eq!(m["inputs"].as_array().unwrap().len(), 4);
    let model = liftprune::net::load_model(p("out").join("model.lpm")).unwrap();
    assert_eq!(model.input_shape, [1, 4, 4]);
    assert_eq!(model.class_count, 2);
}
