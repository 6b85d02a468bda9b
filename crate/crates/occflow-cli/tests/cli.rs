//! End-to-end binary tests: spawn the real executable, check exit codes and
//! produced artifacts. Kept fast with a tiny synthetic configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

use occflow_core::io::{load_metrics_file, load_vector_grid};

const BIN: &str = env!("CARGO_BIN_EXE_occflow");

static DIR_SEQ: AtomicUsize = AtomicUsize::new(0);

fn scratch() -> PathBuf {
    let n = DIR_SEQ.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!("occflow-cli-{}-{n}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn binary")
}

fn assert_exit(out: &Output, code: i32, ctx: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{ctx}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// 40-iteration configuration: enough to exercise both stages, fast enough
/// for a test.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(
        &path,
        "seed = 7\nsigma_cue = 0.5\n\n[render]\nxi = 14.0\nn_samples = 24\n\n\
         [fit]\ntotal_iters = 40\nn_tiles = 1\nn_lidar = 8\nlr = 0.02\n\
         weight_decay = 0.0\nwarmup = 5\n\n[synth]\nwidth = 48\nheight = 36\n",
    )
    .unwrap();
    path
}

fn synth_workspace(dir: &Path) -> PathBuf {
    let config = write_tiny_config(dir);
    let ws = dir.join("ws");
    let out = run(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--out",
        ws.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "synth");
    ws
}

#[test]
fn synth_fit_eval_produces_a_metrics_file() {
    let dir = scratch();
    let ws = synth_workspace(&dir);
    let fit_dir = dir.join("fit");
    let out = run(&[
        "fit",
        "--workspace",
        ws.to_str().unwrap(),
        "--out",
        fit_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "fit");
    for name in ["sdf.grid", "flow.grid", "loss_log.txt"] {
        assert!(fit_dir.join(name).is_file(), "missing {name}");
    }

    let out = run(&[
        "eval",
        "--workspace",
        ws.to_str().unwrap(),
        "--sdf",
        fit_dir.join("sdf.grid").to_str().unwrap(),
        "--flow",
        fit_dir.join("flow.grid").to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "eval");
    let metrics = load_metrics_file(&ws.join("metrics.txt")).unwrap();
    let names: Vec<&str> = metrics.iter().map(|(n, _)| n.as_str()).collect();
    for key in [
        "depth_abs_rel",
        "depth_rmse",
        "rayiou_mean",
        "rayiou_1voxel",
        "sceneflow_epe",
        "sceneflow_sf1",
    ] {
        assert!(names.contains(&key), "missing metric {key} in {names:?}");
    }
    assert!(metrics.iter().all(|(_, v)| v.is_finite()));
}

#[test]
fn stage1_only_fit_leaves_the_flow_grid_zero() {
    let dir = scratch();
    let ws = synth_workspace(&dir);
    let fit_dir = dir.join("fit");
    let out = run(&[
        "fit",
        "--workspace",
        ws.to_str().unwrap(),
        "--stage1-only",
        "--out",
        fit_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "fit --stage1-only");
    let flow = load_vector_grid(&fit_dir.join("flow.grid")).unwrap();
    assert!(flow.data.iter().all(|&v| v == 0.0));
}

#[test]
fn identical_seeds_give_byte_identical_grids() {
    let dir = scratch();
    let ws = synth_workspace(&dir);
    let (a, b) = (dir.join("fit_a"), dir.join("fit_b"));
    for out_dir in [&a, &b] {
        let out = run(&[
            "fit",
            "--workspace",
            ws.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_exit(&out, 0, "fit");
    }
    for name in ["sdf.grid", "flow.grid"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn render_writes_depth_hit_and_flow_maps() {
    let dir = scratch();
    let ws = synth_workspace(&dir);
    let fit_dir = dir.join("fit");
    let out = run(&[
        "fit",
        "--workspace",
        ws.to_str().unwrap(),
        "--out",
        fit_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "fit");
    let prefix = dir.join("render").join("cam0_");
    let out = run(&[
        "render",
        "--workspace",
        ws.to_str().unwrap(),
        "--sdf",
        fit_dir.join("sdf.grid").to_str().unwrap(),
        "--flow",
        fit_dir.join("flow.grid").to_str().unwrap(),
        "--camera",
        "0",
        "--frame",
        "1",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "render");
    let dir_r = dir.join("render");
    for name in ["cam0_depth.pfm", "cam0_hit.pgm", "cam0_flow.flo"] {
        assert!(dir_r.join(name).is_file(), "missing {name}");
    }

    // Out-of-range camera index is a validation error.
    let out = run(&[
        "render",
        "--workspace",
        ws.to_str().unwrap(),
        "--sdf",
        fit_dir.join("sdf.grid").to_str().unwrap(),
        "--camera",
        "9",
        "--frame",
        "0",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert_exit(&out, 1, "render bad camera");
}

#[test]
fn usage_and_validation_errors_exit_one() {
    let out = run(&["fit", "--bogus"]);
    assert_exit(&out, 1, "unknown flag");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("Usage"),
        "usage not printed"
    );

    let out = run(&["definitely-not-a-subcommand"]);
    assert_exit(&out, 1, "unknown subcommand");

    let out = run(&["fit", "--workspace", "/nonexistent-ws", "--out", "/tmp/x"]);
    assert_exit(&out, 1, "missing workspace");

    let dir = scratch();
    let ws = synth_workspace(&dir);
    let out = run(&[
        "eval",
        "--workspace",
        ws.to_str().unwrap(),
        "--sdf",
        ws.join("truth/sdf.grid").to_str().unwrap(),
        "--flow",
        ws.join("truth/flow.grid").to_str().unwrap(),
        "--metrics",
        "depth,bogus",
    ]);
    assert_exit(&out, 1, "unknown metric");

    let out = run(&["--help"]);
    assert_exit(&out, 0, "--help");
}

#[test]
fn kernel_selftest_prints_one_line_per_check() {
    let out = run(&["kernels", "selftest"]);
    assert_exit(&out, 0, "kernels selftest");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let pass_lines = stdout.lines().filter(|l| l.ends_with(": PASS")).count();
    assert!(pass_lines >= 10, "only {pass_lines} PASS lines:\n{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn evaluating_the_oracle_grids_scores_perfectly() {
    let dir = scratch();
    let ws = synth_workspace(&dir);
    // The stored truth grids evaluated against themselves: RayIoU is exactly
    // 1 at every threshold and the velocity error is exactly 0.
    let out = run(&[
        "eval",
        "--workspace",
        ws.to_str().unwrap(),
        "--sdf",
        ws.join("truth/sdf.grid").to_str().unwrap(),
        "--flow",
        ws.join("truth/flow.grid").to_str().unwrap(),
        "--metrics",
        "rayiou,mave",
    ]);
    assert_exit(&out, 0, "eval truth vs truth");
    let metrics = load_metrics_file(&ws.join("metrics.txt")).unwrap();
    for (name, value) in &metrics {
        if name.starts_with("rayiou") {
            assert_eq!(*value, 1.0, "{name}");
        }
        if name == "mave" {
            assert_eq!(*value, 0.0);
        }
    }
    assert!(metrics.iter().any(|(n, _)| n == "mave"), "mave missing");
}
