use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cen_core::annotation::{read_grid_records, PairDataset};
use cen_core::CenModel;

fn cen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cen"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cen(args);
    assert!(
        out.status.success(),
        "cen {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--n-images",
    "40",
    "--biased-workers",
    "4",
    "--context-workers",
    "2",
    "--n-grids",
    "30",
    "--grid-size",
    "8",
    "--grids-per-worker",
    "10",
    "--seed",
    "3",
];

const FAST: &[&str] = &["--epochs", "2", "--hidden", "16", "--batch", "50", "--seed", "3"];

fn simulate(dir: &Path) {
    let mut args = vec!["simulate", "--out-dir", p(dir)];
    args.extend_from_slice(SMALL);
    ok(&args);
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", p(data), "--out-dir", p(out)];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn simulate_writes_dataset_truth_world_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let ds = PairDataset::load(dir.path().join("dataset.jsonl")).unwrap();
    assert_eq!(ds.clusterings.len(), 60);
    assert_eq!(ds.pairs.len(), 60 * 28);
    for f in ["truth.jsonl", "world.jsonl", "simulate.manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("simulate.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["versions"]["cen-core"].is_string());
    assert!(m["outputs"]["dataset.jsonl"].is_string());
}

#[test]
fn simulate_and_train_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate(a.path());
    simulate(b.path());
    for f in ["dataset.jsonl", "truth.jsonl", "world.jsonl", "simulate.manifest.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let (ta, tb) = (a.path().join("t"), b.path().join("t"));
    train(&a.path().join("dataset.jsonl"), &ta, &[]);
    train(&b.path().join("dataset.jsonl"), &tb, &[]);
    for f in ["loss.csv", "model.json", "train.jsonl", "test.jsonl", "train.manifest.json"] {
        assert_eq!(fs::read(ta.join(f)).unwrap(), fs::read(tb.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(ta.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,mean_loss"));
    assert_eq!(csv.lines().count(), 3);
    assert!(fs::read_to_string(ta.join("loss.timing.csv")).unwrap().starts_with("epoch,wall_time_s\n"));
}

#[test]
fn train_splits_by_grid() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let out = dir.path().join("t");
    train(&dir.path().join("dataset.jsonl"), &out, &["--test-fraction", "0.2"]);
    let tr = PairDataset::load(out.join("train.jsonl")).unwrap();
    let te = PairDataset::load(out.join("test.jsonl")).unwrap();
    assert_eq!(te.grids.len(), 6);
    assert!(tr.grids.keys().all(|g| !te.grids.contains_key(g)));
    let m = CenModel::load(out.join("model.json")).unwrap();
    assert_eq!(m.hyper.epochs, 2);
    assert_eq!(m.hyper.hidden, 16);
}

#[test]
fn resume_requires_matching_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let data = dir.path().join("dataset.jsonl");
    let first = dir.path().join("first");
    train(&data, &first, &[]);
    let ck = first.join("checkpoint.json");

    // A finished checkpoint resumed with the same settings is already at
    // its final epoch, so the model comes back unchanged.
    let again = dir.path().join("again");
    train(&data, &again, &["--resume", p(&ck)]);
    assert_eq!(fs::read(first.join("model.json")).unwrap(), fs::read(again.join("model.json")).unwrap());

    let other = dir.path().join("other");
    let mut args: Vec<&str> = vec!["train", "--data", p(&data), "--out-dir", p(&other), "--resume", p(&ck)];
    args.extend_from_slice(&["--epochs", "4", "--hidden", "16", "--batch", "50", "--seed", "3"]);
    let out = cen(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("different hyperparameters"));
}

#[test]
fn eval_reports_metrics_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let t = dir.path().join("t");
    train(&dir.path().join("dataset.jsonl"), &t, &[]);
    let e = dir.path().join("e");
    ok(&[
        "eval",
        "--model",
        p(&t.join("model.json")),
        "--test",
        p(&t.join("test.jsonl")),
        "--data",
        p(&dir.path().join("dataset.jsonl")),
        "--truth",
        p(&dir.path().join("truth.jsonl")),
        "--world",
        p(&dir.path().join("world.jsonl")),
        "--out-dir",
        p(&e),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(e.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["version"], 1);
    for key in ["heldout_accuracy", "mean_row_entropy", "mcc", "attribute_0_entropy"] {
        assert!(report["metrics"][key].is_number(), "{key}: {report}");
    }
    let acc = report["metrics"]["heldout_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let emb = fs::read_to_string(e.join("embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 41);
    assert_eq!(emb.lines().next(), Some("image,x0,x1,x2,x3"));
    let heat = fs::read_to_string(e.join("worker_heatmap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 7);
    assert!(e.join("confusion.csv").exists());
}

#[test]
fn synthesize_writes_a_grid_queue() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let t = dir.path().join("t");
    train(&dir.path().join("dataset.jsonl"), &t, &[]);
    let out = dir.path().join("queue.jsonl");
    ok(&[
        "synthesize",
        "--model",
        p(&t.join("model.json")),
        "--out",
        p(&out),
        "--candidates",
        "500",
        "--top-n",
        "5",
        "--grid-size",
        "8",
    ]);
    let recs = read_grid_records(fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(recs.len(), 5);
    assert!(recs.iter().all(|r| r.images.len() == 8 && r.provenance.is_some()));
    let bad = cen(&["synthesize", "--model", p(&t.join("model.json")), "--out", p(&out), "--target", "9"]);
    assert!(!bad.status.success());
}

#[test]
fn export_snapshots_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("service.toml");
    let store = dir.path().join("store");
    fs::write(
        &cfg,
        format!(
            "image_base_url = \"http://img\"\nn_images = 50\npool_size = 5\nstore_dir = \"{}\"\n",
            store.display()
        ),
    )
    .unwrap();
    let out = dir.path().join("export.jsonl");
    ok(&["export", "--config", p(&cfg), "--out", p(&out)]);
    let ds = PairDataset::load(&out).unwrap();
    assert!(ds.pairs.is_empty());
    assert_eq!(ds.manifest.n_images, 50);

    fs::write(&cfg, "n_images = 50\nbogus = 1\n").unwrap();
    assert!(!cen(&["export", "--config", p(&cfg), "--out", p(&out)]).status.success());
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck", "--draws", "3"]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 9, "{stdout}");
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!cen(&["train", "--data", "/nonexistent.jsonl", "--out-dir", p(dir.path())]).status.success());
    assert!(!cen(&["simulate", "--out-dir", p(dir.path()), "--no-such-flag"]).status.success());
    assert!(!cen(&["frobnicate"]).status.success());
    let bad = cen(&["simulate", "--out-dir", p(dir.path()), "--grids-per-worker", "5"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("at least 10"));
    let bad = cen(&[
        "train",
        "--data",
        "/nonexistent.jsonl",
        "--out-dir",
        p(dir.path()),
        "--variant",
        "triplet",
    ]);
    assert!(!bad.status.success());
}
