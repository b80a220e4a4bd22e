//! End-to-end checks of the command-line surface and file formats, on a
//! small untrained model.

use std::path::Path;
use std::process::Command;

fn shapelab_bin() -> &'static str {
    env!("CARGO_BIN_EXE_shapelab")
}

fn run(args: &[&str]) -> (bool, String) {
    let out = Command::new(shapelab_bin())
        .args(args)
        .output()
        .expect("spawn shapelab");
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.success(), text)
}

#[test]
fn gen_exports_jsonl_and_png() {
    let dir = tempfile::tempdir().unwrap();
    let jsonl = dir.path().join("data.jsonl");
    let pngs = dir.path().join("pngs");
    let (ok, text) = run(&[
        "gen",
        "--pool",
        "estimation",
        "--n",
        "4",
        "--seed",
        "9",
        "--multi-crop",
        "--out",
        jsonl.to_str().unwrap(),
        "--png-dir",
        pngs.to_str().unwrap(),
    ]);
    assert!(ok, "{text}");
    let loaded = shapelab::dataset::import_jsonl(&jsonl).unwrap();
    assert_eq!(loaded.len(), 4);
    assert!(loaded.iter().all(|i| i.scene.multi_crop));
    assert_eq!(std::fs::read_dir(&pngs).unwrap().count(), 4);
}

/// A micro training run exercising train -> eval -> intervene -> report on
/// an untrained-quality checkpoint (tiny step budget, tiny accuracy gate).
#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt.sltc");
    let metrics = dir.path().join("metrics.csv");
    let (ok, text) = run(&[
        "train",
        "--steps",
        "2",
        "--batch",
        "2",
        "--eval-interval",
        "1",
        "--eval-size",
        "8",
        "--target-acc",
        "0.01",
        "--out",
        ckpt.to_str().unwrap(),
        "--metrics",
        metrics.to_str().unwrap(),
    ]);
    assert!(ok, "{text}");
    let metrics_text = std::fs::read_to_string(&metrics).unwrap();
    assert!(metrics_text.starts_with("step,loss,accuracy\n"), "{metrics_text}");

    let (ok, text) = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--n", "8"]);
    assert!(ok, "{text}");
    assert!(text.contains("accuracy over 8 instances"), "{text}");

    // Factorizability without --check must succeed even on a random model.
    let reports = dir.path().join("reports");
    let (ok, text) = run(&[
        "intervene",
        "factorizability",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--role",
        "color",
        "--pairs",
        "2",
        "--out-dir",
        reports.to_str().unwrap(),
    ]);
    assert!(ok, "{text}");
    let json = reports.join("factorizability_color.json");
    assert!(json.exists());

    // report render re-emits byte-identical CSVs.
    let render_dir = dir.path().join("rendered");
    let (ok, text) = run(&[
        "report",
        "render",
        "--json",
        json.to_str().unwrap(),
        "--out-dir",
        render_dir.to_str().unwrap(),
    ]);
    assert!(ok, "{text}");
    for entry in std::fs::read_dir(&render_dir).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap().to_str().unwrap().to_string();
        let orig = reports.join(&name);
        assert_eq!(
            std::fs::read(&orig).unwrap(),
            std::fs::read(&p).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn deltas_estimate_writes_loadable_containers() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt.sltc");
    let (ok, text) = run(&[
        "train",
        "--steps",
        "1",
        "--batch",
        "1",
        "--eval-interval",
        "1",
        "--eval-size",
        "2",
        "--target-acc",
        "0.01",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(ok, "{text}");
    let deltas_dir = dir.path().join("deltas");
    let (ok, text) = run(&[
        "deltas",
        "estimate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--role",
        "item",
        "--pairs",
        "3",
        "--out-dir",
        deltas_dir.to_str().unwrap(),
    ]);
    assert!(ok, "{text}");
    let dv = shapelab::tensorio::load_deltas(&deltas_dir.join("deltas_item.sltc")).unwrap();
    assert_eq!(dv.span_len, 1);
    assert_eq!(dv.n_pairs, 3);
    assert_eq!(dv.pair_seeds.len(), 3);
}

#[test]
fn check_flag_fails_on_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt.sltc");
    let (ok, _) = run(&[
        "train",
        "--steps",
        "1",
        "--batch",
        "1",
        "--eval-interval",
        "1",
        "--eval-size",
        "2",
        "--target-acc",
        "0.01",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(ok);
    // A random model cannot pass the committed thresholds; --check must
    // propagate that as a nonzero exit code.
    let reports = dir.path().join("reports");
    let (ok, text) = run(&[
        "intervene",
        "mean",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--pairs",
        "2",
        "--n",
        "4",
        "--out-dir",
        reports.to_str().unwrap(),
        "--check",
    ]);
    assert!(!ok, "expected check failure: {text}");
    assert!(text.contains("FAIL"), "{text}");
}

#[test]
fn train_failure_exit_code_carries_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt.sltc");
    let (ok, text) = run(&[
        "train",
        "--steps",
        "2",
        "--batch",
        "1",
        "--eval-interval",
        "1",
        "--eval-size",
        "4",
        "--target-acc",
        "0.99",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(!ok);
    assert!(text.contains("target accuracy"), "{text}");
    assert!(Path::new(&ckpt).exists(), "checkpoint still written");
}
