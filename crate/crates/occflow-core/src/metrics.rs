//! Evaluation suite: monocular depth errors, ray-based occupancy IoU,
//! disparity/flow outlier rates, and voxel velocity error.
//!
//! Everything here is pure arithmetic over maps and grids; each metric has a
//! closed-form or hand-march oracle in the tests.


use crate::error::Error;
use crate::geometry::{aabb_clip, Ray};
use crate::grid::{OccupancyGrid, VectorField};
use crate::maps::{FlowMap, MaskMap, ScalarMap};
use crate::Result;

/// Depth evaluation window and subsampling.
#[derive(Debug, Clone)]
pub struct DepthEvalConfig {
    pub min_depth: f64,
    pub max_depth: f64,
    /// Evaluate every `stride`-th pixel along each axis.
    pub stride: usize,
}

impl Default for DepthEvalConfig {
    fn default() -> Self {
        DepthEvalConfig {
            min_depth: 0.1,
            max_depth: 80.0,
            stride: 1,
        }
    }
}

impl DepthEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth) {
            return Err(Error::Config(format!(
                "depth window [{}, {}] must satisfy 0 < min < max",
                self.min_depth, self.max_depth
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("evaluation stride must be positive".into()));
        }
        Ok(())
    }
}

/// The four standard monocular depth errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    /// Pixels that survived masking.
    pub n_pixels: usize,
}

/// Depth errors over pixels whose ground truth lies inside the configured
/// window; predictions are clamped into the window first (misses rendered as
/// 0 or infinity then score as the nearest bound, not as NaN).
pub fn depth_metrics(
    pred: &ScalarMap,
    gt: &ScalarMap,
    cfg: &DepthEvalConfig,
) -> Result<DepthMetrics> {
    cfg.validate()?;
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::DimensionMismatch(format!(
            "depth maps are {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut n = 0usize;
    for y in (0..gt.height).step_by(cfg.stride) {
        for x in (0..gt.width).step_by(cfg.stride) {
            let d_gt = gt.get(x, y);
            if !d_gt.is_finite() || d_gt < cfg.min_depth || d_gt > cfg.max_depth {
                continue;
            }
            let d = pred.get(x, y).clamp(cfg.min_depth, cfg.max_depth);
            let err = d - d_gt;
            abs_rel += err.abs() / d_gt;
            sq_rel += err * err / d_gt;
            sq += err * err;
            sq_log += (d.ln() - d_gt.ln()).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyEvalSet);
    }
    let m = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / m,
        sq_rel: sq_rel / m,
        rmse: (sq / m).sqrt(),
        rmse_log: (sq_log / m).sqrt(),
        n_pixels: n,
    })
}

/// Distance tolerances (meters) for ray-based occupancy comparison.
#[derive(Debug, Clone)]
pub struct RayIouConfig {
    pub thresholds: Vec<f64>,
}

impl Default for RayIouConfig {
    fn default() -> Self {
        RayIouConfig {
            thresholds: vec![1.0, 2.0, 4.0],
        }
    }
}

impl RayIouConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("no ray IoU thresholds".into()));
        }
        let ascending = self
            .thresholds
            .windows(2)
            .all(|w| w[0] < w[1]);
        if self.thresholds[0] <= 0.0 || !ascending {
            return Err(Error::Config(
                "ray IoU thresholds must be positive and ascending".into(),
            ));
        }
        Ok(())
    }
}

/// Per-threshold IoU plus the scalar mean over thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct RayIouReport {
    /// (threshold, IoU) pairs in config order.
    pub per_threshold: Vec<(f64, f64)>,
    pub mean: f64,
}

/// Mean of per-threshold IoUs; the aggregation used by [`ray_iou`].
pub fn ray_iou_mean(per_threshold: &[f64]) -> f64 {
    per_threshold.iter().sum::<f64>() / per_threshold.len() as f64
}

/// March to the first occupied voxel and return the ray parameter at that
/// voxel's entry face (0 when the origin already sits inside an occupied
/// voxel); `None` when the ray exits without hitting anything. With a unit
/// direction the parameter is the travel distance in meters.
pub fn march_to_occupied(occ: &OccupancyGrid, ray: &Ray) -> Option<f64> {
    let spec = &occ.spec;
    let (lo, hi) = spec.aabb();
    let (t_enter, _) = aabb_clip(ray, &lo, &hi)?;
    let t_start = t_enter.max(0.0);
    // Nudge off the boundary so the starting voxel is well defined.
    let start = ray.origin + ray.dir * (t_start + 1e-12);
    let mut idx = [0i64; 3];
    for a in 0..3 {
        let u = (start[a] - spec.origin[a]) / spec.voxel_size[a];
        idx[a] = (u.floor() as i64).clamp(0, spec.dims[a] as i64 - 1);
    }
    let mut step = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let d = ray.dir[a];
        if d.abs() < 1e-15 {
            continue;
        }
        step[a] = if d > 0.0 { 1 } else { -1 };
        let face = if d > 0.0 { idx[a] + 1 } else { idx[a] };
        let boundary = spec.origin[a] + face as f64 * spec.voxel_size[a];
        t_next[a] = (boundary - ray.origin[a]) / d;
        t_delta[a] = spec.voxel_size[a] / d.abs();
    }
    let mut t = t_start;
    loop {
        if occ.binary[spec.index(idx[0] as usize, idx[1] as usize, idx[2] as usize)] {
            return Some(t);
        }
        let a = (0..3)
            .min_by(|&i, &j| t_next[i].total_cmp(&t_next[j]))
            .unwrap();
        t = t_next[a];
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= spec.dims[a] as i64 {
            return None;
        }
        t_next[a] += t_delta[a];
    }
}

/// Ray-based occupancy IoU. Per ray, both grids are marched to their first
/// occupied voxel; a ray hitting both within the distance tolerance is a
/// true positive, hitting both outside it counts against both sides (one
/// false positive and one false negative), hitting only one side counts
/// there, and rays missing both are ignored. Per threshold,
/// `IoU = TP / (P + G - TP)` over the rays that hit pred (P) or ground truth
/// (G); with no hits at all the grids agree vacuously and IoU is 1.
pub fn ray_iou(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    rays: &[Ray],
    cfg: &RayIouConfig,
) -> Result<RayIouReport> {
    cfg.validate()?;
    if pred.spec != gt.spec {
        return Err(Error::DimensionMismatch(
            "occupancy grids disagree in geometry".into(),
        ));
    }
    let mut hits_pred = 0usize;
    let mut hits_gt = 0usize;
    let mut tp = vec![0usize; cfg.thresholds.len()];
    for ray in rays {
        let d_pred = march_to_occupied(pred, ray);
        let d_gt = march_to_occupied(gt, ray);
        if d_pred.is_some() {
            hits_pred += 1;
        }
        if d_gt.is_some() {
            hits_gt += 1;
        }
        if let (Some(p), Some(g)) = (d_pred, d_gt) {
            for (i, thr) in cfg.thresholds.iter().enumerate() {
                if (p - g).abs() < *thr {
                    tp[i] += 1;
                }
            }
        }
    }
    let per_threshold: Vec<(f64, f64)> = cfg
        .thresholds
        .iter()
        .zip(&tp)
        .map(|(thr, &t)| {
            let union = hits_pred + hits_gt - t;
            let iou = if union == 0 { 1.0 } else { t as f64 / union as f64 };
            (*thr, iou)
        })
        .collect();
    let ious: Vec<f64> = per_threshold.iter().map(|(_, iou)| *iou).collect();
    Ok(RayIouReport {
        mean: ray_iou_mean(&ious),
        per_threshold,
    })
}

/// Disparity and optical-flow errors with KITTI-style outlier rates.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlowMetrics {
    /// Mean absolute disparity error (px).
    pub de: f64,
    /// Mean flow end-point error (px).
    pub epe: f64,
    /// Foreground-restricted variants; absent when no foreground pixel is
    /// valid.
    pub de_fg: Option<f64>,
    pub epe_fg: Option<f64>,
    /// Disparity outliers: error >= 4 px and >= 5% of the true disparity.
    pub d1: f64,
    /// Flow outliers: error >= 8 px and >= 10% of the true flow magnitude.
    pub f1: f64,
    /// Outlier in disparity or flow.
    pub sf1: f64,
    pub n_pixels: usize,
    /// Valid pixels inside the foreground mask.
    pub n_fg_pixels: usize,
}

/// Disparity/flow evaluation over pixels where both depths are positive and
/// finite; disparity = focal * baseline / depth.
pub fn scene_flow_metrics(
    pred_depth: &ScalarMap,
    pred_flow: &FlowMap,
    gt_depth: &ScalarMap,
    gt_flow: &FlowMap,
    foreground: &MaskMap,
    focal: f64,
    baseline: f64,
) -> Result<SceneFlowMetrics> {
    let (w, h) = (gt_depth.width, gt_depth.height);
    let dims_ok = pred_depth.width == w
        && pred_depth.height == h
        && pred_flow.width == w
        && pred_flow.height == h
        && gt_flow.width == w
        && gt_flow.height == h
        && foreground.width == w
        && foreground.height == h;
    if !dims_ok {
        return Err(Error::DimensionMismatch(
            "scene-flow maps disagree in size".into(),
        ));
    }
    if !(focal > 0.0) || !(baseline > 0.0) {
        return Err(Error::Config("focal and baseline must be positive".into()));
    }
    let fb = focal * baseline;
    let (mut de, mut epe) = (0.0f64, 0.0f64);
    let (mut de_fg, mut epe_fg) = (0.0f64, 0.0f64);
    let (mut d1, mut f1, mut sf1) = (0usize, 0usize, 0usize);
    let (mut n, mut n_fg) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let (dp, dg) = (pred_depth.get(x, y), gt_depth.get(x, y));
            if !(dp.is_finite() && dg.is_finite() && dp > 0.0 && dg > 0.0) {
                continue;
            }
            let (disp_p, disp_g) = (fb / dp, fb / dg);
            let disp_err = (disp_p - disp_g).abs();
            let (fp, fg) = (pred_flow.get(x, y), gt_flow.get(x, y));
            let flow_err = ((fp[0] - fg[0]).powi(2) + (fp[1] - fg[1]).powi(2)).sqrt();
            let gt_mag = (fg[0] * fg[0] + fg[1] * fg[1]).sqrt();
            de += disp_err;
            epe += flow_err;
            n += 1;
            if foreground.get(x, y) {
                de_fg += disp_err;
                epe_fg += flow_err;
                n_fg += 1;
            }
            let d_out = disp_err >= 4.0 && disp_err >= 0.05 * disp_g;
            let f_out = flow_err >= 8.0 && flow_err >= 0.10 * gt_mag;
            d1 += d_out as usize;
            f1 += f_out as usize;
            sf1 += (d_out || f_out) as usize;
        }
    }
    if n == 0 {
        return Err(Error::EmptyEvalSet);
    }
    let m = n as f64;
    Ok(SceneFlowMetrics {
        de: de / m,
        epe: epe / m,
        de_fg: (n_fg > 0).then(|| de_fg / n_fg as f64),
        epe_fg: (n_fg > 0).then(|| epe_fg / n_fg as f64),
        d1: d1 as f64 / m,
        f1: f1 as f64 / m,
        sf1: sf1 as f64 / m,
        n_pixels: n,
        n_fg_pixels: n_fg,
    })
}

/// Mean absolute velocity error over movable occupied voxels, class-agnostic.
/// Every ground-truth-occupied voxel flagged movable is matched to the
/// nearest predicted-occupied voxel center; matches farther than
/// `match_radius` meters are dropped. Velocity is horizontal flow divided by
/// `delta_t`; the error is the L2 difference between the matched pair's
/// velocities. Returns `None` when nothing matches.
pub fn mave(
    pred_flow: &VectorField,
    gt_flow: &VectorField,
    pred_occ: &OccupancyGrid,
    gt_occ: &OccupancyGrid,
    movable: &[bool],
    delta_t: f64,
    match_radius: f64,
) -> Result<Option<f64>> {
    let spec = &gt_occ.spec;
    if pred_occ.spec != *spec || pred_flow.spec != *spec || gt_flow.spec != *spec {
        return Err(Error::DimensionMismatch(
            "velocity-error inputs disagree in grid geometry".into(),
        ));
    }
    if movable.len() != spec.n_voxels() {
        return Err(Error::DimensionMismatch(format!(
            "movable mask covers {} voxels, grid has {}",
            movable.len(),
            spec.n_voxels()
        )));
    }
    if !(delta_t > 0.0) || !(match_radius > 0.0) {
        return Err(Error::Config(
            "frame interval and match radius must be positive".into(),
        ));
    }
    // Search window in voxels around each query, per axis.
    let reach: Vec<i64> = (0..3)
        .map(|a| (match_radius / spec.voxel_size[a]).ceil() as i64 + 1)
        .collect();
    let mut total = 0.0f64;
    let mut matched = 0usize;
    for i in 0..spec.dims[0] {
        for j in 0..spec.dims[1] {
            for k in 0..spec.dims[2] {
                let at = spec.index(i, j, k);
                if !gt_occ.binary[at] || !movable[at] {
                    continue;
                }
                let center = spec.voxel_center(i, j, k);
                let mut best: Option<(f64, usize)> = None;
                for ii in window(i, reach[0], spec.dims[0]) {
                    for jj in window(j, reach[1], spec.dims[1]) {
                        for kk in window(k, reach[2], spec.dims[2]) {
                            let cand = spec.index(ii, jj, kk);
                            if !pred_occ.binary[cand] {
                                continue;
                            }
                            let d = (spec.voxel_center(ii, jj, kk) - center).norm();
                            if best.map_or(true, |(bd, _)| d < bd) {
                                best = Some((d, cand));
                            }
                        }
                    }
                }
                if let Some((d, cand)) = best {
                    if d <= match_radius {
                        let pu = pred_flow.data[2 * cand];
                        let pv = pred_flow.data[2 * cand + 1];
                        let gu = gt_flow.data[2 * at];
                        let gv = gt_flow.data[2 * at + 1];
                        total += ((pu - gu).powi(2) + (pv - gv).powi(2)).sqrt() / delta_t;
                        matched += 1;
                    }
                }
            }
        }
    }
    Ok((matched > 0).then(|| total / matched as f64))
}

fn window(center: usize, reach: i64, dim: usize) -> std::ops::Range<usize> {
    let lo = (center as i64 - reach).max(0) as usize;
    let hi = ((center as i64 + reach + 1) as usize).min(dim);
    lo..hi
}

/// Deterministic fan of query rays from one origin: `n_az` azimuths spanning
/// `az_span` crossed with `n_el` elevations spanning `el_span` (radians,
/// inclusive endpoints; single-count axes use the span midpoint). Azimuth 0
/// looks along +x, elevation is signed toward +z.
pub fn panoramic_rays(
    origin: &nalgebra::Vector3<f64>,
    n_az: usize,
    n_el: usize,
    az_span: (f64, f64),
    el_span: (f64, f64),
) -> Vec<Ray> {
    assert!(n_az > 0 && n_el > 0, "ray counts must be positive");
    let lerp = |span: (f64, f64), i: usize, n: usize| {
        if n == 1 {
            0.5 * (span.0 + span.1)
        } else {
            span.0 + (span.1 - span.0) * i as f64 / (n - 1) as f64
        }
    };
    let mut rays = Vec::with_capacity(n_az * n_el);
    for ie in 0..n_el {
        let el = lerp(el_span, ie, n_el);
        for ia in 0..n_az {
            let az = lerp(az_span, ia, n_az);
            let dir = nalgebra::Vector3::new(
                el.cos() * az.cos(),
                el.cos() * az.sin(),
                el.sin(),
            );
            rays.push(Ray::new(*origin, dir).expect("unit direction"));
        }
    }
    rays
}
