//! `occflow`: synthesize a workspace, fit grids to it, evaluate, render.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, malformed
//! workspace/config, usage), 2 runtime error (optimization failure, I/O).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::Vector3;

use occflow_core::geometry::Reprojector;
use occflow_core::grid::sdf_to_occupancy;
use occflow_core::io::{
    load_run_config, load_scalar_grid, load_vector_grid, load_workspace, save_flow_flo,
    save_loss_log, save_mask_pgm, save_metrics_file, save_scalar_grid, save_scalar_pfm,
    save_vector_grid, save_workspace,
};
use occflow_core::metrics::{
    depth_metrics, mave, panoramic_rays, ray_iou, scene_flow_metrics, DepthEvalConfig,
    RayIouConfig, SceneFlowMetrics,
};
use occflow_core::renderer::render_tile;
use occflow_core::synth::{build_frameset, shrink_scene, standard_scene, voxelize};
use occflow_core::{
    fit, Camera, DepthMetrics, Error, FlowMap, FrameSet, MaskMap, Result, ScalarMap, Supervisor,
};

/// Query-ray fan used by `eval` for the ray-based occupancy IoU; matches the
/// synthetic LiDAR's field of view at its full angular resolution.
const EVAL_N_AZ: usize = 96;
const EVAL_N_EL: usize = 20;
const EVAL_AZ_SPAN: (f64, f64) = (-1.2566370614359172, 1.2566370614359172);
const EVAL_EL_SPAN: (f64, f64) = (-0.6108652381980153, 0.06981317007977318);
/// Sensor height fallback when the workspace declares no LiDAR origin.
const EVAL_ORIGIN_Z: f64 = 1.8;

/// Nearest-voxel match radius for the velocity error metric, meters.
const MAVE_RADIUS: f64 = 2.0;

#[derive(Parser)]
#[command(name = "occflow", version, about = "Per-scene occupancy and flow fitting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic workspace with oracle ground truth.
    Synth {
        /// Run configuration (TOML); section [synth] sets the resolution.
        #[arg(long)]
        config: PathBuf,
        /// Workspace directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit SDF and flow grids to a workspace.
    Fit {
        #[arg(long)]
        workspace: PathBuf,
        /// Run configuration; defaults to the one stored in the workspace.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Geometry-only fit: run every iteration in stage 1, flow stays zero.
        #[arg(long)]
        stage1_only: bool,
        /// Output directory for sdf.grid, flow.grid, loss_log.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate fitted grids against workspace ground truth.
    Eval {
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long)]
        sdf: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        /// Comma-separated subset of: depth, rayiou, sceneflow, mave.
        #[arg(long, default_value = "depth,rayiou,sceneflow,mave")]
        metrics: String,
        /// Metrics file destination (default: <workspace>/metrics.txt).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stereo baseline in meters for the disparity conversion.
        #[arg(long, default_value_t = 0.54)]
        baseline: f64,
    },
    /// Render depth/flow/hit maps from fitted grids through one camera.
    Render {
        /// Workspace providing camera intrinsics and poses.
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long)]
        sdf: PathBuf,
        #[arg(long)]
        flow: Option<PathBuf>,
        /// Camera index.
        #[arg(long)]
        camera: usize,
        /// Frame index supplying the viewpoint pose.
        #[arg(long)]
        frame: usize,
        /// Output path prefix; writes <prefix>depth.pfm, <prefix>hit.pgm,
        /// and <prefix>flow.flo when a flow grid is given.
        #[arg(long)]
        out: String,
    },
    /// Fusion kernel maintenance commands.
    Kernels {
        #[command(subcommand)]
        cmd: KernelsCmd,
    },
}

#[derive(Subcommand)]
enum KernelsCmd {
    /// Run every built-in kernel oracle and print one pass/fail line each.
    Selftest,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 = the inputs were wrong, 2 = the run itself failed.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Manifest(_)
        | Error::Codec { .. }
        | Error::DimensionMismatch(_)
        | Error::Config(_) => 1,
        _ => 2,
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { config, out } => cmd_synth(&config, &out),
        Cmd::Fit {
            workspace,
            config,
            stage1_only,
            out,
        } => cmd_fit(&workspace, config.as_deref(), stage1_only, &out),
        Cmd::Eval {
            workspace,
            sdf,
            flow,
            metrics,
            out,
            baseline,
        } => cmd_eval(&workspace, &sdf, &flow, &metrics, out.as_deref(), baseline),
        Cmd::Render {
            workspace,
            sdf,
            flow,
            camera,
            frame,
            out,
        } => cmd_render(&workspace, &sdf, flow.as_deref(), camera, frame, &out),
        Cmd::Kernels {
            cmd: KernelsCmd::Selftest,
        } => cmd_kernels_selftest(),
    }
}

fn cmd_synth(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_run_config(config)?;
    let mut scene = standard_scene(cfg.fit.seed);
    scene.spec = cfg.grid.clone();
    if (cfg.synth_width, cfg.synth_height) != (scene.img_width, scene.img_height) {
        shrink_scene(&mut scene, cfg.synth_width, cfg.synth_height);
    }
    scene.cue_noise_px = cfg.sigma_cue;
    let fs_data = build_frameset(&scene);
    let truth = voxelize(&scene, cfg.render.xi);
    save_workspace(out, &fs_data, scene.t_ref, Some(&truth), Some(&cfg))?;
    let lidar_points: usize = fs_data.frames.iter().map(|f| f.lidar.len()).sum();
    println!(
        "synth: {} frames x {} cameras at {}x{}, {} lidar points, grid {:?} -> {}",
        fs_data.frames.len(),
        fs_data.cameras.len(),
        cfg.synth_width,
        cfg.synth_height,
        lidar_points,
        scene.spec.dims,
        out.display()
    );
    Ok(())
}

fn cmd_fit(workspace: &Path, config: Option<&Path>, stage1_only: bool, out: &Path) -> Result<()> {
    let (ws, fs_data) = load_workspace(workspace)?;
    let mut cfg = match config {
        Some(path) => load_run_config(path)?,
        None => ws.run_config()?.unwrap_or_default(),
    };
    if stage1_only {
        cfg.fit.two_stage = true;
        cfg.fit.stage1_fraction = 1.0;
    }
    cfg.validate()?;
    let sup = Supervisor::new(&fs_data, ws.manifest.t_ref, cfg.render, cfg.weights)?;
    let start = Instant::now();
    let result = fit(&sup, &cfg.grid, &cfg.fit)?;
    fs::create_dir_all(out)?;
    save_scalar_grid(&out.join("sdf.grid"), &result.sdf)?;
    save_vector_grid(&out.join("flow.grid"), &result.flow)?;
    save_loss_log(&out.join("loss_log.txt"), &result.history)?;
    let final_loss = result.history.last().map_or(f64::NAN, |s| s.total);
    println!(
        "fit: {} iterations in {:.1}s, final loss {:.6} -> {}",
        result.history.len(),
        start.elapsed().as_secs_f64(),
        final_loss,
        out.display()
    );
    Ok(())
}

/// Per-pixel maps rendered from the fitted grids through one camera at the
/// reference frame: camera depth, pixel-space flow toward the next frame.
/// Misses and behind-camera reprojections get depth 0, which the metrics
/// treat as invalid.
fn render_eval_maps(
    fs_data: &FrameSet,
    cam: &Camera,
    sdf: &occflow_core::ScalarField,
    flow: &occflow_core::VectorField,
    t_ref: usize,
    params: &occflow_core::RenderParams,
) -> (ScalarMap, FlowMap) {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let t_rel = fs_data.relative_pose(t_ref, t_ref + 1);
    let rp = Reprojector::new(cam, &t_rel);
    let tile = render_tile(sdf, Some(flow), cam, 0, 0, w, h, params);
    let mut depth = ScalarMap::new(w, h);
    let mut flow_px = FlowMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let Some(rs) = &tile.rays[i] else { continue };
            let px = &tile.pixels[i];
            if px.weight_sum < params.weight_threshold {
                continue;
            }
            let p = rs.ray.at(rs.expected_t());
            let f3 = Vector3::new(px.flow[0], px.flow[1], 0.0);
            match rp.reproject_point(&p, &f3) {
                Ok((target, _)) => {
                    depth.set(x, y, px.depth);
                    flow_px.set(x, y, [target.x - x as f64, target.y - y as f64]);
                }
                Err(_) => continue,
            }
        }
    }
    (depth, flow_px)
}

/// Pixel-count-weighted pooling over per-camera depth metrics; RMSE terms
/// pool in the squared domain.
fn pool_depth(per_cam: &[DepthMetrics]) -> DepthMetrics {
    let n: usize = per_cam.iter().map(|m| m.n_pixels).sum();
    let nf = n as f64;
    let wsum = |f: &dyn Fn(&DepthMetrics) -> f64| {
        per_cam.iter().map(|m| f(m) * m.n_pixels as f64).sum::<f64>() / nf
    };
    DepthMetrics {
        abs_rel: wsum(&|m| m.abs_rel),
        sq_rel: wsum(&|m| m.sq_rel),
        rmse: wsum(&|m| m.rmse * m.rmse).sqrt(),
        rmse_log: wsum(&|m| m.rmse_log * m.rmse_log).sqrt(),
        n_pixels: n,
    }
}

fn pool_scene_flow(per_cam: &[SceneFlowMetrics]) -> SceneFlowMetrics {
    let n: usize = per_cam.iter().map(|m| m.n_pixels).sum();
    let n_fg: usize = per_cam.iter().map(|m| m.n_fg_pixels).sum();
    let nf = n as f64;
    let wsum = |f: &dyn Fn(&SceneFlowMetrics) -> f64| {
        per_cam.iter().map(|m| f(m) * m.n_pixels as f64).sum::<f64>() / nf
    };
    let fg = |f: &dyn Fn(&SceneFlowMetrics) -> Option<f64>| {
        (n_fg > 0).then(|| {
            per_cam
                .iter()
                .filter_map(|m| f(m).map(|v| v * m.n_fg_pixels as f64))
                .sum::<f64>()
                / n_fg as f64
        })
    };
    SceneFlowMetrics {
        de: wsum(&|m| m.de),
        epe: wsum(&|m| m.epe),
        de_fg: fg(&|m| m.de_fg),
        epe_fg: fg(&|m| m.epe_fg),
        d1: wsum(&|m| m.d1),
        f1: wsum(&|m| m.f1),
        sf1: wsum(&|m| m.sf1),
        n_pixels: n,
        n_fg_pixels: n_fg,
    }
}

fn cmd_eval(
    workspace: &Path,
    sdf_path: &Path,
    flow_path: &Path,
    metrics: &str,
    out: Option<&Path>,
    baseline: f64,
) -> Result<()> {
    const KNOWN: [&str; 4] = ["depth", "rayiou", "sceneflow", "mave"];
    let mut requested = Vec::new();
    let mut seen = BTreeSet::new();
    for name in metrics.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if !KNOWN.contains(&name) {
            return Err(Error::Config(format!(
                "unknown metric `{name}`; expected a subset of {}",
                KNOWN.join(",")
            )));
        }
        if seen.insert(name.to_string()) {
            requested.push(name);
        }
    }
    if requested.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    if !(baseline > 0.0 && baseline.is_finite()) {
        return Err(Error::Config(format!(
            "baseline must be positive, got {baseline}"
        )));
    }

    let (ws, fs_data) = load_workspace(workspace)?;
    let sdf = load_scalar_grid(sdf_path)?;
    let flow = load_vector_grid(flow_path)?;
    if flow.spec != sdf.spec {
        return Err(Error::DimensionMismatch(format!(
            "`{}` and `{}` describe different grids",
            sdf_path.display(),
            flow_path.display()
        )));
    }
    let cfg = ws.run_config()?.unwrap_or_default();
    let t_ref = ws.manifest.t_ref;
    let frame = &fs_data.frames[t_ref];

    // Per-camera rendered maps, shared by the depth and scene-flow metrics.
    let rendered: Option<Vec<(ScalarMap, FlowMap)>> =
        if requested.iter().any(|m| *m == "depth" || *m == "sceneflow") {
            Some(
                fs_data
                    .cameras
                    .iter()
                    .map(|cam| render_eval_maps(&fs_data, cam, &sdf, &flow, t_ref, &cfg.render))
                    .collect(),
            )
        } else {
            None
        };
    let truth = if requested.iter().any(|m| *m == "rayiou" || *m == "mave") {
        match ws.truth(cfg.render.xi)? {
            Some(t) => Some(t),
            None => {
                return Err(Error::Config(
                    "workspace has no ground-truth grids; rayiou/mave need them".into(),
                ))
            }
        }
    } else {
        None
    };

    let mut lines: Vec<(String, f64)> = Vec::new();
    for name in requested {
        match name {
            "depth" => {
                let maps = rendered.as_ref().unwrap();
                let mut per_cam = Vec::new();
                for (c, (pred_depth, _)) in maps.iter().enumerate() {
                    let Some(gt) = &frame.gt_depth[c] else { continue };
                    per_cam.push(depth_metrics(pred_depth, gt, &DepthEvalConfig::default())?);
                }
                if per_cam.is_empty() {
                    return Err(Error::Config(
                        "no ground-truth depth maps at the reference frame".into(),
                    ));
                }
                let m = pool_depth(&per_cam);
                lines.push(("depth_abs_rel".into(), m.abs_rel));
                lines.push(("depth_sq_rel".into(), m.sq_rel));
                lines.push(("depth_rmse".into(), m.rmse));
                lines.push(("depth_rmse_log".into(), m.rmse_log));
                lines.push(("depth_n_pixels".into(), m.n_pixels as f64));
            }
            "sceneflow" => {
                let maps = rendered.as_ref().unwrap();
                let mut per_cam = Vec::new();
                for (c, (pred_depth, pred_flow)) in maps.iter().enumerate() {
                    let (Some(gt_depth), Some(gt_flow)) =
                        (&frame.gt_depth[c], &frame.gt_flow[c])
                    else {
                        continue;
                    };
                    per_cam.push(scene_flow_metrics(
                        pred_depth,
                        pred_flow,
                        gt_depth,
                        gt_flow,
                        &frame.movable[c],
                        fs_data.cameras[c].intrinsics.fx,
                        baseline,
                    )?);
                }
                if per_cam.is_empty() {
                    return Err(Error::Config(
                        "no ground-truth depth/flow maps at the reference frame".into(),
                    ));
                }
                let m = pool_scene_flow(&per_cam);
                lines.push(("sceneflow_de".into(), m.de));
                lines.push(("sceneflow_epe".into(), m.epe));
                if let Some(v) = m.de_fg {
                    lines.push(("sceneflow_de_fg".into(), v));
                }
                if let Some(v) = m.epe_fg {
                    lines.push(("sceneflow_epe_fg".into(), v));
                }
                lines.push(("sceneflow_d1".into(), m.d1));
                lines.push(("sceneflow_f1".into(), m.f1));
                lines.push(("sceneflow_sf1".into(), m.sf1));
                lines.push(("sceneflow_n_pixels".into(), m.n_pixels as f64));
                lines.push(("sceneflow_n_fg_pixels".into(), m.n_fg_pixels as f64));
            }
            "rayiou" => {
                let gt = truth.as_ref().unwrap();
                let pred_occ = sdf_to_occupancy(&sdf, cfg.render.xi);
                let origin = fs_data
                    .lidar_origin
                    .unwrap_or_else(|| Vector3::new(0.0, 0.0, EVAL_ORIGIN_Z));
                let rays =
                    panoramic_rays(&origin, EVAL_N_AZ, EVAL_N_EL, EVAL_AZ_SPAN, EVAL_EL_SPAN);
                let report = ray_iou(&pred_occ, &gt.occupancy, &rays, &RayIouConfig::default())?;
                for (thr, iou) in &report.per_threshold {
                    lines.push((format!("rayiou_{thr}m"), *iou));
                }
                lines.push(("rayiou_mean".into(), report.mean));
                let voxel = sdf.spec.voxel_size[0];
                let one_voxel = ray_iou(
                    &pred_occ,
                    &gt.occupancy,
                    &rays,
                    &RayIouConfig {
                        thresholds: vec![voxel],
                    },
                )?;
                lines.push(("rayiou_1voxel".into(), one_voxel.per_threshold[0].1));
            }
            "mave" => {
                let gt = truth.as_ref().unwrap();
                let pred_occ = sdf_to_occupancy(&sdf, cfg.render.xi);
                match mave(
                    &flow,
                    &gt.flow,
                    &pred_occ,
                    &gt.occupancy,
                    &gt.movable,
                    fs_data.delta_t,
                    MAVE_RADIUS,
                )? {
                    Some(v) => lines.push(("mave".into(), v)),
                    None => eprintln!(
                        "mave: no movable ground-truth voxel matched a predicted voxel; skipping"
                    ),
                }
            }
            _ => unreachable!(),
        }
    }

    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| workspace.join("metrics.txt"));
    save_metrics_file(&out_path, &lines)?;
    for (name, value) in &lines {
        println!("{name} {value}");
    }
    eprintln!("eval: wrote {} metrics to {}", lines.len(), out_path.display());
    Ok(())
}

fn cmd_render(
    workspace: &Path,
    sdf_path: &Path,
    flow_path: Option<&Path>,
    camera: usize,
    frame: usize,
    out_prefix: &str,
) -> Result<()> {
    let (ws, fs_data) = load_workspace(workspace)?;
    if camera >= fs_data.cameras.len() {
        return Err(Error::Config(format!(
            "camera {camera} out of range, workspace has {}",
            fs_data.cameras.len()
        )));
    }
    if frame >= fs_data.frames.len() {
        return Err(Error::Config(format!(
            "frame {frame} out of range, workspace has {}",
            fs_data.frames.len()
        )));
    }
    let sdf = load_scalar_grid(sdf_path)?;
    let flow = flow_path.map(load_vector_grid).transpose()?;
    let cfg = ws.run_config()?.unwrap_or_default();

    // The grids live in the reference frame's ego coordinates; move the
    // chosen frame's camera there.
    let t_rel = fs_data.relative_pose(frame, ws.manifest.t_ref);
    let base = &fs_data.cameras[camera];
    let cam = Camera {
        intrinsics: base.intrinsics.clone(),
        cam_to_ego: t_rel.compose(&base.cam_to_ego),
    };
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let tile = render_tile(&sdf, flow.as_ref(), &cam, 0, 0, w, h, &cfg.render);

    let mut depth = ScalarMap::new(w, h);
    let mut flow_map = FlowMap::new(w, h);
    let mut hit = MaskMap::new(w, h);
    let mut n_hit = 0usize;
    for i in 0..w * h {
        let px = &tile.pixels[i];
        let is_hit = tile.rays[i].is_some() && px.weight_sum >= cfg.render.weight_threshold;
        let (x, y) = (i % w, i / w);
        hit.data[i] = is_hit;
        if is_hit {
            depth.set(x, y, px.depth);
            flow_map.set(x, y, px.flow);
            n_hit += 1;
        }
    }

    if let Some(parent) = Path::new(&format!("{out_prefix}x")).parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_scalar_pfm(Path::new(&format!("{out_prefix}depth.pfm")), &depth)?;
    save_mask_pgm(Path::new(&format!("{out_prefix}hit.pgm")), &hit)?;
    if flow.is_some() {
        save_flow_flo(Path::new(&format!("{out_prefix}flow.flo")), &flow_map)?;
    }
    println!(
        "render: camera {camera} frame {frame}, {}/{} pixels hit -> {out_prefix}{{depth.pfm,hit.pgm{}}}",
        n_hit,
        w * h,
        if flow.is_some() { ",flow.flo" } else { "" }
    );
    Ok(())
}

fn cmd_kernels_selftest() -> Result<()> {
    let checks = occflow_core::fusion::selftest();
    let mut failures = 0usize;
    for c in &checks {
        println!(
            "{}/{}: {}",
            c.kernel,
            c.check,
            if c.pass { "PASS" } else { "FAIL" }
        );
        failures += usize::from(!c.pass);
    }
    println!(
        "kernels selftest: {}/{} checks passed",
        checks.len() - failures,
        checks.len()
    );
    if failures > 0 {
        // A failing oracle means the build is wrong, not the invocation.
        std::process::exit(2);
    }
    Ok(())
}
