use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use t2sim::labels::read_labels;
use t2sim::motion::{write_curve, MotionCurve};
use t2sim::sim::DatasetIndex;
use t2sim::volume::{fft2_per_slice, read_volume};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_t2sim"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small volumes and short scans so every command runs in well under a second.
fn small_config(dir: &Path) -> PathBuf {
    let cfg = r#"{
        "phantom": {"dims": [2, 12, 16, 16], "te_ms": [5.0, 25.0], "voxel_size_mm": [2.0, 2.0, 3.0],
                    "tissues": [{"label": "gm", "s0": 1.0, "t2star_ms": 60.0},
                                {"label": "wm", "s0": 0.8, "t2star_ms": 50.0},
                                {"label": "csf", "s0": 1.2, "t2star_ms": 200.0}],
                    "edge_mm": 1.0},
        "scheme": {"tr_s": 2.0},
        "curve": {"n_samples": 40, "dt_s": 1.0, "mean_mm": 0.9, "n_training": 4},
        "recon": {"max_iter": 10},
        "n_phantoms": 2
    }"#;
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn zero_motion_simulation_reproduces_the_fourier_transform() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let ph = dir.path().join("ph.vol");
    ok(&[
        "--config",
        p(&cfg),
        "--seed",
        "3",
        "phantom",
        "--out",
        p(&ph),
    ]);
    assert!(dir.path().join("ph.vol.config.json").exists());
    let curve = dir.path().join("still.csv");
    write_curve(&MotionCurve::stationary(40, 1.0).unwrap(), &curve).unwrap();
    let sim = dir.path().join("sim");
    ok(&[
        "--config",
        p(&cfg),
        "simulate",
        "--phantom",
        p(&ph),
        "--curve",
        p(&curve),
        "--out",
        p(&sim),
    ]);
    let k = read_volume(sim.join("kspace.vol")).unwrap();
    let fx = fft2_per_slice(&read_volume(&ph).unwrap()).unwrap();
    let err: f64 = k
        .data()
        .iter()
        .zip(fx.data().iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    assert!((err / fx.energy()).sqrt() < 1e-6);
    assert_eq!(
        read_labels(sim.join("labels.csv"))
            .unwrap()
            .count_corrupted(),
        0
    );
    assert!(sim.join("displacement.csv").exists());
    assert!(sim.join("config.json").exists());
}

#[test]
fn dataset_splits_are_phantom_disjoint_and_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let make = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "--config",
            p(&cfg),
            "--seed",
            "5",
            "dataset",
            "--out",
            p(&out),
        ]);
        out
    };
    let a = make("a");
    let index = DatasetIndex::read(a.join("index.json")).unwrap();
    // one simulation per (phantom, curve slot)
    let runs: std::collections::HashSet<&str> = index
        .samples
        .iter()
        .map(|s| s.id.rsplit_once("_s").unwrap().0)
        .collect();
    assert_eq!(runs.len(), 2 * 6);
    for ph in ["ph000", "ph001"] {
        let splits: std::collections::HashSet<_> = index
            .samples
            .iter()
            .filter(|s| s.phantom_id == ph)
            .map(|s| s.split)
            .collect();
        assert_eq!(splits.len(), 1, "{ph} spans several splits");
    }
    let b = make("b");
    assert_eq!(
        std::fs::read(a.join("index.json")).unwrap(),
        std::fs::read(b.join("index.json")).unwrap()
    );
    let first = &index.samples[0];
    assert_eq!(
        std::fs::read(a.join(&first.kspace)).unwrap(),
        std::fs::read(b.join(&first.kspace)).unwrap()
    );
}

#[test]
fn evaluate_self_comparison_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("a.csv");
    std::fs::write(
        &labels,
        "# convention: 1 = motion-free, 0 = motion-corrupted\n1,0,1,1\n1,1,0,1\n",
    )
    .unwrap();
    let rows = dir.path().join("rows.csv");
    let out = ok(&[
        "evaluate",
        "--pred",
        p(&labels),
        "--target",
        p(&labels),
        "--csv",
        p(&rows),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["accuracy"], 1.0);
    assert_eq!(report["nd_rate"], 0.0);
    assert_eq!(report["wd_rate"], 0.0);
    ok(&[
        "evaluate",
        "--pred",
        p(&labels),
        "--target",
        p(&labels),
        "--csv",
        p(&rows),
    ]);
    assert_eq!(std::fs::read_to_string(&rows).unwrap().lines().count(), 3);
}

#[test]
fn oracle_sweep_gives_ordered_perfect_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let root = dir.path().join("sweep");
    for t in ["1.0", "0.25", "0.5"] {
        let out = root.join(format!("dmin_{}", t.trim_end_matches(".0")));
        ok(&[
            "--config",
            p(&cfg),
            "dataset",
            "--d-min",
            t,
            "--out",
            p(&out),
        ]);
    }
    let csv = dir.path().join("sweep.csv");
    ok(&[
        "--config",
        p(&cfg),
        "sweep",
        "--dataset-root",
        p(&root),
        "--d-min",
        "1.0",
        "0.25",
        "0.5",
        "--split",
        "all",
        "--out",
        p(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(
        rows.iter().map(|r| r[0]).collect::<Vec<_>>(),
        ["0.25", "0.5", "1"]
    );
    assert!(rows.iter().all(|r| r[1] == "1"));

    // predictions that call every line clean
    let preds = dir.path().join("preds");
    for t in [0.25, 0.5, 1.0] {
        let index = DatasetIndex::read(root.join(format!("dmin_{t}")).join("index.json")).unwrap();
        let pd = preds.join(format!("dmin_{t}"));
        std::fs::create_dir_all(&pd).unwrap();
        for s in &index.samples {
            let target = read_labels(root.join(format!("dmin_{t}")).join(&s.labels)).unwrap();
            let all = t2sim::LineLabelMask::all_clean(target.n_slices(), target.n_pe());
            std::fs::write(pd.join(format!("{}.csv", s.id)), all.to_csv(None)).unwrap();
        }
    }
    ok(&[
        "--config",
        p(&cfg),
        "sweep",
        "--dataset-root",
        p(&root),
        "--pred-dir",
        p(&preds),
        "--d-min",
        "0.25",
        "0.5",
        "1.0",
        "--split",
        "all",
        "--out",
        p(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(
            cells[3], "0",
            "all-clean predictions never flag clean lines: {line}"
        );
    }
}

#[test]
fn recon_writes_image_metrics_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let ph = dir.path().join("ph.vol");
    ok(&["--config", p(&cfg), "phantom", "--out", p(&ph)]);
    let sim = dir.path().join("sim");
    ok(&[
        "--config",
        p(&cfg),
        "simulate",
        "--phantom",
        p(&ph),
        "--out",
        p(&sim),
    ]);
    let rec = dir.path().join("rec.vol");
    ok(&[
        "--config",
        p(&cfg),
        "recon",
        "--kspace",
        p(&sim.join("kspace.vol")),
        "--labels",
        p(&sim.join("labels.csv")),
        "--lambda",
        "2",
        "--ref",
        p(&ph),
        "--out",
        p(&rec),
    ]);
    let img = read_volume(&rec).unwrap();
    assert_eq!(img.space(), t2sim::Space::Image);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("rec.vol.metrics.json")).unwrap(),
    )
    .unwrap();
    assert!(report["quality"]["psnr_db"].is_number());
    assert_eq!(report["traces"].as_array().unwrap().len(), 2 * 12);
    let resolved: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("rec.vol.config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(resolved["recon"]["lambda"], 2.0);
}

#[test]
fn augment_writes_model_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("aug");
    ok(&["--config", p(&cfg), "augment", "--n", "3", "--out", p(&out)]);
    assert!(out.join("model.json").exists());
    for i in 0..3 {
        let c = t2sim::motion::read_curve(out.join(format!("aug_{i:03}.csv"))).unwrap();
        assert_eq!(c.len(), 40);
    }
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"sim": {"d_min": 0.5}}"#).unwrap();
    let out = run(&[
        "--config",
        p(&bad),
        "phantom",
        "--out",
        p(&dir.path().join("x.vol")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let missing = dir.path().join("nope.csv");
    let out = run(&["evaluate", "--pred", p(&missing), "--target", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&[
        "simulate",
        "--phantom",
        p(&missing),
        "--d-min=-1",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["simulate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    // output path below a regular file cannot be created
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = run(&[
        "--config",
        p(&cfg),
        "phantom",
        "--out",
        p(&blocker.join("ph.vol")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
