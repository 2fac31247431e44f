use std::fs;
use std::path::{Path, PathBuf};

use edgegs::cli::{run_from, EXIT_DATA, EXIT_OK};
use edgegs::io::{self, ReportFile};
use edgegs::train::Checkpoint;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("edgegs-it-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn cli(args: &[&str]) -> i32 {
    run_from(std::iter::once("edgegs").chain(args.iter().copied()))
}

fn synth_small(dir: &Path, views: &str) -> PathBuf {
    let data = dir.join("data");
    let code = cli(&["synth", "--kind", "cube", "--views", views, "--size", "64", "--out", data.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    data
}

fn short_config(dir: &Path, lines: &str) -> PathBuf {
    let p = dir.join("train.cfg");
    fs::write(&p, lines).unwrap();
    p
}

#[test]
fn synthetic_dataset_loads_back() {
    let dir = scratch("roundtrip");
    let data = synth_small(&dir, "5");
    let ds = io::load_dataset(&data).unwrap();
    assert_eq!(ds.names.len(), 5);
    assert_eq!(ds.views.len(), 5);
    assert_eq!(ds.gt_edges.as_ref().map(|e| e.len()), Some(12));
    for v in &ds.views {
        assert_eq!((v.target.width, v.target.height), (64, 64));
        assert!(v.target.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(v.target.data.iter().any(|&x| x > 0.5));
    }
    // writing what was read reproduces the same files
    let again = dir.join("again");
    io::write_dataset(&again, &ds.views, ds.gt_edges.as_deref()).unwrap();
    let a = fs::read(io::DatasetLayout::new(&data).cameras()).unwrap();
    let b = fs::read(io::DatasetLayout::new(&again).cameras()).unwrap();
    assert_eq!(a, b);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn training_twice_with_one_seed_gives_identical_checkpoints() {
    let dir = scratch("determinism");
    let data = synth_small(&dir, "4");
    let cfg = short_config(&dir, "init_count = 500\n");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        let code = cli(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "7",
            "--epochs",
            "3",
            "--config",
            cfg.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
        outputs.push(fs::read(out.join("checkpoint.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let ck: Checkpoint = serde_json::from_slice(&outputs[0]).unwrap();
    assert_eq!(ck.epoch, 3);
    assert_eq!(ck.config.seed, 7);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn training_reduces_projection_loss() {
    let dir = scratch("loss");
    let data = synth_small(&dir, "8");
    let cfg = short_config(
        &dir,
        "epochs = 80\nregularizer_start_epoch = 50\ninit_count = 1000\nseed = 3\n",
    );
    let out = dir.join("run");
    let code = cli(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let report: ReportFile = serde_json::from_slice(&fs::read(out.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report.report.epochs.len(), 80);
    let first = report.report.initial_proj().unwrap();
    let last = report.report.final_proj().unwrap();
    assert!(last < 0.25 * first, "L_proj {first} -> {last}");
    assert!(out.join("gaussians.ply").exists());
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn extract_and_eval_run_on_a_trained_checkpoint() {
    let dir = scratch("extract");
    let data = synth_small(&dir, "4");
    let cfg = short_config(&dir, "init_count = 300\n");
    let out = dir.join("run");
    let out_s = out.to_str().unwrap();
    let data_s = data.to_str().unwrap();
    assert_eq!(
        cli(&["train", "--data", data_s, "--out", out_s, "--epochs", "2", "--config", cfg.to_str().unwrap()]),
        EXIT_OK
    );
    let ck = out.join("checkpoint.json");
    let ck_s = ck.to_str().unwrap();
    // opacities are still at their initial 0.08, so the default filter keeps nothing
    assert_eq!(cli(&["extract", "--checkpoint", ck_s, "--out", out_s]), EXIT_DATA);
    let xcfg = dir.join("extract.cfg");
    fs::write(&xcfg, "opacity_filter = 0\n").unwrap();
    assert_eq!(
        cli(&["extract", "--checkpoint", ck_s, "--out", out_s, "--config", xcfg.to_str().unwrap()]),
        EXIT_OK
    );
    let pts = io::read_ply(&out.join("edge_points.ply")).unwrap();
    assert_eq!(pts.len(), 300);
    let edges = io::read_edges(&out.join("edges.json")).unwrap();
    let gt = io::DatasetLayout::new(&data).gt_edges();
    let pred = out.join("edges.json");
    let code = cli(&["eval", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap(), "--out", out_s]);
    assert_eq!(code, EXIT_OK, "{} predicted edges", edges.len());
    let m = io::read_metrics(&out.join("metrics.json")).unwrap();
    assert!(m.scores.iter().all(|s| (0.0..=100.0).contains(&s.recall)));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = scratch("corrupt");
    let ck = dir.join("checkpoint.json");
    fs::write(&ck, "{\"format\": \"something-else\"}").unwrap();
    let out = dir.join("out");
    assert_eq!(cli(&["extract", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_DATA);
    let _ = fs::remove_dir_all(&dir);
}
