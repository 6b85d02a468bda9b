//! Self-supervised loss terms over ray batches, with hand-written adjoints.
//!
//! A batch is drawn as 8x8 pixel tiles (SSIM patches and smoothness first
//! differences then stay inside a tile's image neighborhood) plus a LiDAR
//! subset. Every term reports an unweighted mean in [`LossBreakdown`];
//! [`LossWeights`] combine them into the optimized total. Gradients flow into
//! dense [`GradientBuffers`] shaped like the SDF and flow grids.
//!
//! Classification state (ray validity, the dynamic mask, counts) is frozen at
//! assembly: within one evaluation it is data, not a differentiated quantity.

use nalgebra::{Vector2, Vector3};
use rand::Rng;

use crate::error::Error;
use crate::geometry::{lidar_rays, static_flow, Camera, FrameSet, Reprojector, RigidTransform};
use crate::grid::{
    sdf_gradient, sdf_gradient_backward, sdf_second_differences,
    sdf_second_differences_backward, FeatureVolume, GridSpec, ScalarField, TrilinearStencil,
    VectorField,
};
use crate::maps::ImageRgb;
use crate::renderer::{render_ray, weights_backward, RaySample, RenderParams};
use crate::Result;

/// Tiles are 8x8 pixels; they are placed with this margin to the image border
/// so 3x3 patches and bilinear lookups around tile pixels stay in bounds.
pub const TILE: usize = 8;
const TILE_MARGIN: usize = 2;
const TILE_AREA: usize = TILE * TILE;

/// Loss combination weights and classification thresholds.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_flow: f64,
    pub lambda_range: f64,
    pub lambda_eik: f64,
    pub lambda_hess: f64,
    pub lambda_smooth: f64,
    pub lambda_dreg: f64,
    /// Cap on the dynamic-ray rebalancing factor gamma.
    pub thre: f64,
    /// Variance discount of the scale-invariant log range loss.
    pub lambda_si: f64,
    /// D-SSIM vs L1 mix in the photometric distance.
    pub alpha_pm: f64,
    /// Dynamic-classification threshold on |cue - static flow|, pixels.
    pub theta_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_flow: 5e-3,
            lambda_range: 0.2,
            lambda_eik: 0.1,
            lambda_hess: 0.01,
            lambda_smooth: 0.02,
            lambda_dreg: 0.1,
            thre: 10.0,
            lambda_si: 0.85,
            alpha_pm: 0.85,
            theta_d: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_flow,
            self.lambda_range,
            self.lambda_eik,
            self.lambda_hess,
            self.lambda_smooth,
            self.lambda_dreg,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(self.thre > 0.0) {
            return Err(Error::Config("gamma cap thre must be positive".into()));
        }
        for (name, v) in [("lambda_si", self.lambda_si), ("alpha_pm", self.alpha_pm)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if !(self.theta_d >= 0.0) {
            return Err(Error::Config("theta_d must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-term raw means (no lambda weighting) from one batch evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub reproj: f64,
    pub flow_static: f64,
    pub flow_dynamic: f64,
    pub range: f64,
    pub eik: f64,
    pub hessian: f64,
    pub smooth: f64,
    pub dreg: f64,
    /// Rebalancing factor applied to the dynamic flow term.
    pub gamma: f64,
}

impl LossBreakdown {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.reproj
            + w.lambda_flow * (self.flow_static + self.gamma * self.flow_dynamic)
            + w.lambda_range * self.range
            + w.lambda_eik * self.eik
            + w.lambda_hess * self.hessian
            + w.lambda_smooth * self.smooth
            + w.lambda_dreg * self.dreg
    }
}

/// Which loss terms participate (value and gradient together). Used for stage
/// scheduling and for isolating terms in gradient checks.
#[derive(Debug, Clone, Copy)]
pub struct LossToggles {
    pub reproj: bool,
    pub flow: bool,
    pub range: bool,
    pub eik: bool,
    pub hessian: bool,
    pub smooth: bool,
    pub dreg: bool,
}

impl LossToggles {
    pub fn all() -> Self {
        LossToggles {
            reproj: true,
            flow: true,
            range: true,
            eik: true,
            hessian: true,
            smooth: true,
            dreg: true,
        }
    }

    pub fn none() -> Self {
        LossToggles {
            reproj: false,
            flow: false,
            range: false,
            eik: false,
            hessian: false,
            smooth: false,
            dreg: false,
        }
    }

    /// Stage 1 of the two-stage schedule: geometry only, flow terms silent.
    pub fn stage1() -> Self {
        LossToggles {
            flow: false,
            dreg: false,
            ..LossToggles::all()
        }
    }
}

/// Dense gradient accumulators shaped like the fitted grids, plus scratch
/// volumes reused by the eikonal and Hessian transposes.
pub struct GradientBuffers {
    /// d(total)/d(sdf voxel), flat grid order.
    pub sdf: Vec<f64>,
    /// d(total)/d(flow voxel channel), interleaved [x, y] per voxel.
    pub flow: Vec<f64>,
    grad_adj: FeatureVolume,
    hess_adj: FeatureVolume,
}

impl GradientBuffers {
    pub fn new(spec: &GridSpec) -> Self {
        GradientBuffers {
            sdf: vec![0.0; spec.n_voxels()],
            flow: vec![0.0; spec.n_voxels() * 2],
            grad_adj: FeatureVolume::new_zero(spec.clone(), 3),
            hess_adj: FeatureVolume::new_zero(spec.clone(), 6),
        }
    }

    pub fn clear(&mut self) {
        self.sdf.fill(0.0);
        self.flow.fill(0.0);
        self.grad_adj.data.fill(0.0);
        self.hess_adj.data.fill(0.0);
    }

    pub fn check_finite(&self, iter: usize) -> Result<()> {
        if let Some(pos) = self.sdf.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                iter,
                context: format!("sdf gradient at flat index {pos}"),
            });
        }
        if let Some(pos) = self.flow.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                iter,
                context: format!("flow gradient at flat index {pos}"),
            });
        }
        Ok(())
    }
}

/// 3x3 RGB patch, pixel-major ((dy, dx) row-major, then channel).
pub type Patch = [f64; 27];

/// Patch around integer pixel (x, y); `None` if it would leave the image.
pub fn source_patch(img: &ImageRgb, x: usize, y: usize) -> Option<Patch> {
    if x < 1 || y < 1 || x + 1 >= img.width || y + 1 >= img.height {
        return None;
    }
    let mut out = [0.0; 27];
    let mut at = 0;
    for dy in 0..3 {
        for dx in 0..3 {
            let px = img.pixel(x + dx - 1, y + dy - 1);
            out[at..at + 3].copy_from_slice(&px);
            at += 3;
        }
    }
    Some(out)
}

/// Bilinear patch around continuous pixel (x, y), with the spatial derivative
/// of every entry. `None` if any tap leaves the bilinear domain.
pub fn target_patch(img: &ImageRgb, x: f64, y: f64) -> Option<(Patch, [[f64; 2]; 27])> {
    let mut vals = [0.0; 27];
    let mut grads = [[0.0; 2]; 27];
    let mut at = 0;
    for dy in -1..=1 {
        for dx in -1..=1 {
            for ch in 0..3 {
                let (v, g) = img.sample_bilinear(x + dx as f64, y + dy as f64, ch)?;
                vals[at] = v;
                grads[at] = g;
                at += 1;
            }
        }
    }
    Some((vals, grads))
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// SSIM of one 9-pixel channel with the derivative wrt `b`. Population
/// statistics (divide by 9), standard stabilizer constants.
fn ssim_channel_grad(a: &[f64; 9], b: &[f64; 9]) -> (f64, [f64; 9]) {
    let n = 9.0;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for j in 0..9 {
        var_a += (a[j] - mu_a) * (a[j] - mu_a);
        var_b += (b[j] - mu_b) * (b[j] - mu_b);
        cov += (a[j] - mu_a) * (b[j] - mu_b);
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    let a1 = 2.0 * mu_a * mu_b + SSIM_C1;
    let a2 = 2.0 * cov + SSIM_C2;
    let b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
    let b2 = var_a + var_b + SSIM_C2;
    let denom = b1 * b2;
    let s = a1 * a2 / denom;
    let mut grad = [0.0; 9];
    for j in 0..9 {
        let da1 = 2.0 * mu_a / n;
        let da2 = 2.0 * (a[j] - mu_a) / n;
        let db1 = 2.0 * mu_b / n;
        let db2 = 2.0 * (b[j] - mu_b) / n;
        grad[j] =
            ((da1 * a2 + a1 * da2) * denom - a1 * a2 * (db1 * b2 + b1 * db2)) / (denom * denom);
    }
    (s, grad)
}

/// Sign with the flat-spot subgradient pinned to zero.
#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Photometric distance between two RGB patches:
/// `alpha_pm * (1 - SSIM)/2 + (1 - alpha_pm) * mean|a - b|`,
/// SSIM averaged over channels. Also returns the derivative wrt `b`.
pub fn photometric_grad(a: &Patch, b: &Patch, alpha_pm: f64) -> (f64, Patch) {
    let mut ssim_sum = 0.0;
    let mut grad = [0.0; 27];
    for ch in 0..3 {
        let mut a9 = [0.0; 9];
        let mut b9 = [0.0; 9];
        for p in 0..9 {
            a9[p] = a[p * 3 + ch];
            b9[p] = b[p * 3 + ch];
        }
        let (s, g) = ssim_channel_grad(&a9, &b9);
        ssim_sum += s;
        for p in 0..9 {
            grad[p * 3 + ch] = -alpha_pm / 2.0 * g[p] / 3.0;
        }
    }
    let ssim = ssim_sum / 3.0;
    let mut l1 = 0.0;
    for j in 0..27 {
        l1 += (a[j] - b[j]).abs();
        grad[j] += (1.0 - alpha_pm) * sign0(b[j] - a[j]) / 27.0;
    }
    l1 /= 27.0;
    let value = alpha_pm * (1.0 - ssim) / 2.0 + (1.0 - alpha_pm) * l1;
    (value, grad)
}

pub fn photometric(a: &Patch, b: &Patch, alpha_pm: f64) -> f64 {
    photometric_grad(a, b, alpha_pm).0
}

/// Dynamic-ray rebalancing factor `min(M_all / M_d, thre)`; an empty dynamic
/// set is pinned to the cap.
pub fn gamma_rebalance(m_all: usize, m_d: usize, thre: f64) -> f64 {
    if m_d == 0 {
        thre
    } else {
        (m_all as f64 / m_d as f64).min(thre)
    }
}

/// Dynamic classification of one pixel: movable, and the flow cue deviates
/// from the ego-induced static flow at the given depth by more than `theta_d`
/// pixels. Non-positive or unprojectable depths classify static.
pub fn classify_dynamic(
    cam: &Camera,
    t_rel: &RigidTransform,
    x: &Vector2<f64>,
    depth: f64,
    cue: [f64; 2],
    movable: bool,
    theta_d: f64,
) -> bool {
    if !movable || !(depth > 0.0) {
        return false;
    }
    match static_flow(cam, t_rel, x, depth) {
        Ok(fs) => Vector2::new(cue[0] - fs.x, cue[1] - fs.y).norm() > theta_d,
        Err(_) => false,
    }
}

/// Draws an earlier frame with probability proportional to a Gaussian in the
/// ego-distance to the reference frame; `sigma_aux -> 0` degenerates to the
/// nearest frame. `None` when no earlier frame exists.
pub fn sample_aux_frame<R: Rng>(
    fs: &FrameSet,
    t_ref: usize,
    sigma_aux: f64,
    rng: &mut R,
) -> Option<usize> {
    if t_ref == 0 {
        return None;
    }
    let d2: Vec<f64> = (0..t_ref)
        .map(|t| fs.relative_pose(t_ref, t).translation.norm_squared())
        .collect();
    let min_d2 = d2.iter().cloned().fold(f64::INFINITY, f64::min);
    if sigma_aux <= 1e-12 {
        return d2.iter().position(|&d| d == min_d2);
    }
    // Shift by the minimum so the nearest frame's weight is exactly 1 and the
    // total never underflows.
    let w: Vec<f64> = d2
        .iter()
        .map(|&d| (-(d - min_d2) / (2.0 * sigma_aux * sigma_aux)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for (t, wt) in w.iter().enumerate() {
        draw -= wt;
        if draw <= 0.0 {
            return Some(t);
        }
    }
    Some(t_ref - 1)
}

/// One sampled camera ray with everything its loss terms need.
#[derive(Debug, Clone)]
pub struct BatchRay {
    pub x: usize,
    pub y: usize,
    pub rs: RaySample,
    /// Converts ray length to camera depth.
    pub cos_z: f64,
    /// Weight sum cleared the miss threshold at assembly.
    pub valid: bool,
    pub movable: bool,
    /// Classified dynamic at assembly (implies `movable` and `valid`).
    pub dynamic: bool,
    pub cue_fwd: Option<[f64; 2]>,
    /// Auxiliary earlier frame and its backward cue (static rays only).
    pub bwd: Option<(usize, [f64; 2])>,
    /// Current flow grid sampled at the ray's points.
    pub flow_samples: Vec<[f64; 2]>,
}

impl BatchRay {
    /// Expected camera depth.
    pub fn depth(&self) -> f64 {
        self.rs.expected_t() * self.cos_z
    }

    /// Expected 2-channel flow from the stored samples.
    pub fn rendered_flow(&self) -> [f64; 2] {
        let mut f = [0.0; 2];
        for (w, s) in self.rs.weights.iter().zip(&self.flow_samples) {
            f[0] += w * s[0];
            f[1] += w * s[1];
        }
        f
    }
}

/// An 8x8 pixel tile of rays from one camera (row-major; `None` = grid miss).
#[derive(Debug, Clone)]
pub struct BatchTile {
    pub cam: usize,
    pub x0: usize,
    pub y0: usize,
    pub rays: Vec<Option<BatchRay>>,
}

#[derive(Debug, Clone)]
pub struct LidarRay {
    pub rs: RaySample,
    pub range: f64,
    pub valid: bool,
}

/// One iteration's sampled supervision set. Counts and classifications are
/// fixed at assembly time.
pub struct RayBatch {
    pub tiles: Vec<BatchTile>,
    pub lidar: Vec<LidarRay>,
    /// Valid camera rays.
    pub m_all: usize,
    /// Valid rays classified dynamic.
    pub m_d: usize,
}

impl RayBatch {
    pub fn m_s(&self) -> usize {
        self.m_all - self.m_d
    }

    /// Re-renders every ray against updated fields, keeping structure,
    /// classification, and sample positions fixed. Finite-difference probes
    /// use this so a perturbed evaluation shares the batch's discrete state.
    pub fn refresh(&mut self, sdf: &ScalarField, flow: &VectorField, params: &RenderParams) {
        for tile in &mut self.tiles {
            for ray in tile.rays.iter_mut().flatten() {
                ray.rs.refresh(sdf, params.xi);
                for (f, st) in ray.flow_samples.iter_mut().zip(&ray.rs.stencils) {
                    *f = flow.sample_stencil(st);
                }
            }
        }
        for lr in &mut self.lidar {
            lr.rs.refresh(sdf, params.xi);
        }
    }
}

/// Batch-shape knobs.
#[derive(Debug, Clone, Copy)]
pub struct BatchConfig {
    pub n_tiles: usize,
    pub n_lidar: usize,
    /// Ego-distance spread (meters) of the auxiliary-frame Gaussian.
    pub sigma_aux: f64,
    /// Stage 2 behavior: classify dynamic rays and attach forward cues.
    pub stage2: bool,
    /// Attach backward cues to static rays (stage 2 only).
    pub use_backward: bool,
}

/// Binds a frame set and loss configuration for batch assembly + evaluation.
/// Supervision is anchored at `t_ref`: rays come from its cameras, the
/// forward cue targets `t_ref + 1`, backward cues target earlier frames.
pub struct Supervisor<'a> {
    pub fs: &'a FrameSet,
    pub t_ref: usize,
    pub params: RenderParams,
    pub weights: LossWeights,
}

impl<'a> Supervisor<'a> {
    pub fn new(
        fs: &'a FrameSet,
        t_ref: usize,
        params: RenderParams,
        weights: LossWeights,
    ) -> Result<Self> {
        fs.validate()?;
        weights.validate()?;
        if t_ref + 1 >= fs.frames.len() {
            return Err(Error::Config(format!(
                "reference frame {t_ref} needs a successor among {} frames",
                fs.frames.len()
            )));
        }
        Ok(Supervisor {
            fs,
            t_ref,
            params,
            weights,
        })
    }

    /// Draws tiles and LiDAR rays, renders them against the current fields,
    /// and classifies each ray. Single-threaded and deterministic in `rng`.
    pub fn assemble_batch<R: Rng>(
        &self,
        sdf: &ScalarField,
        flow: &VectorField,
        cfg: &BatchConfig,
        rng: &mut R,
    ) -> Result<RayBatch> {
        let t = self.t_ref;
        let frame = &self.fs.frames[t];
        let t_rel_fwd = self.fs.relative_pose(t, t + 1);
        let mut tiles = Vec::with_capacity(cfg.n_tiles);
        let mut m_all = 0;
        let mut m_d = 0;
        for _ in 0..cfg.n_tiles {
            let cam_id = rng.gen_range(0..self.fs.cameras.len());
            let cam = &self.fs.cameras[cam_id];
            let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
            if w < TILE + 2 * TILE_MARGIN || h < TILE + 2 * TILE_MARGIN {
                return Err(Error::Config(format!(
                    "image {w}x{h} too small for {TILE}x{TILE} tiles with margin {TILE_MARGIN}"
                )));
            }
            let x0 = rng.gen_range(TILE_MARGIN..=w - TILE - TILE_MARGIN);
            let y0 = rng.gen_range(TILE_MARGIN..=h - TILE - TILE_MARGIN);
            let mut rays = Vec::with_capacity(TILE_AREA);
            for dy in 0..TILE {
                for dx in 0..TILE {
                    let (x, y) = (x0 + dx, y0 + dy);
                    let px = Vector2::new(x as f64, y as f64);
                    let (ray, cos_z) = cam.ray(&px);
                    let Some(rs) = render_ray(sdf, &ray, &self.params, Some(rng)) else {
                        rays.push(None);
                        continue;
                    };
                    let flow_samples: Vec<[f64; 2]> =
                        rs.stencils.iter().map(|st| flow.sample_stencil(st)).collect();
                    let valid = rs.weight_sum() > self.params.weight_threshold;
                    let movable = frame.movable[cam_id].get(x, y);
                    let cue_fwd = frame.cue_forward[cam_id].as_ref().map(|m| m.get(x, y));
                    let dynamic = cfg.stage2
                        && valid
                        && cue_fwd.is_some_and(|cue| {
                            classify_dynamic(
                                cam,
                                &t_rel_fwd,
                                &px,
                                rs.expected_t() * cos_z,
                                cue,
                                movable,
                                self.weights.theta_d,
                            )
                        });
                    let bwd = if cfg.stage2 && cfg.use_backward && valid && !dynamic {
                        sample_aux_frame(self.fs, t, cfg.sigma_aux, rng).and_then(|ta| {
                            frame.cue_backward[cam_id]
                                .get(&ta)
                                .map(|m| (ta, m.get(x, y)))
                        })
                    } else {
                        None
                    };
                    if valid {
                        m_all += 1;
                        if dynamic {
                            m_d += 1;
                        }
                    }
                    rays.push(Some(BatchRay {
                        x,
                        y,
                        rs,
                        cos_z,
                        valid,
                        movable,
                        dynamic,
                        cue_fwd,
                        bwd,
                        flow_samples,
                    }));
                }
            }
            tiles.push(BatchTile {
                cam: cam_id,
                x0,
                y0,
                rays,
            });
        }

        let mut lidar = Vec::new();
        if cfg.n_lidar > 0 && !frame.lidar.is_empty() {
            let origin = self.fs.lidar_origin.unwrap_or_else(Vector3::zeros);
            // Partial Fisher-Yates: the first `take` entries are a uniform
            // sample without replacement.
            let mut order: Vec<usize> = (0..frame.lidar.len()).collect();
            let take = cfg.n_lidar.min(order.len());
            for i in 0..take {
                let j = rng.gen_range(i..order.len());
                order.swap(i, j);
            }
            let pts: Vec<Vector3<f64>> = order[..take].iter().map(|&i| frame.lidar[i]).collect();
            for (ray, range) in lidar_rays(&pts, &origin)? {
                let Some(rs) = render_ray(sdf, &ray, &self.params, Some(rng)) else {
                    continue;
                };
                let valid =
                    rs.weight_sum() > self.params.weight_threshold && rs.expected_t() > 1e-9;
                lidar.push(LidarRay { rs, range, valid });
            }
        }
        Ok(RayBatch {
            tiles,
            lidar,
            m_all,
            m_d,
        })
    }

    /// Evaluates every enabled term over the batch; when `grads` is given,
    /// also accumulates d(total)/d(grid values), all lambda weightings and
    /// gamma applied. Forward value and gradient are always consistent.
    pub fn evaluate(
        &self,
        batch: &RayBatch,
        sdf: &ScalarField,
        flow: &VectorField,
        enabled: &LossToggles,
        mut grads: Option<&mut GradientBuffers>,
    ) -> LossBreakdown {
        assert_eq!(sdf.spec, flow.spec, "sdf and flow grids must share a lattice");
        let w = &self.weights;
        let mut bd = LossBreakdown {
            gamma: gamma_rebalance(batch.m_all, batch.m_d, w.thre),
            ..Default::default()
        };
        let m_all = batch.m_all.max(1) as f64;
        let m_s = batch.m_s().max(1) as f64;
        let t_rel_fwd = self.fs.relative_pose(self.t_ref, self.t_ref + 1);

        // The eikonal mean runs over every sample point of every ray, camera
        // and LiDAR alike, so the count and the gradient volume come first.
        let mut n_eik = 0usize;
        if enabled.eik {
            for tile in &batch.tiles {
                for ray in tile.rays.iter().flatten() {
                    n_eik += ray.rs.ts.len();
                }
            }
            for lr in &batch.lidar {
                n_eik += lr.rs.ts.len();
            }
        }
        let grad_vol = if n_eik > 0 { Some(sdf_gradient(sdf)) } else { None };
        let eik_scale = w.lambda_eik / n_eik.max(1) as f64;

        // Smoothness normalizes by the number of contributing tiles, which
        // the per-tile gradient scale needs up front.
        let n_smooth_tiles = if enabled.smooth {
            batch
                .tiles
                .iter()
                .filter(|t| tile_smooth_state(t).is_some())
                .count()
        } else {
            0
        };
        let mut smooth_sum = 0.0;

        for tile in &batch.tiles {
            let cam = &self.fs.cameras[tile.cam];
            let img_src = &self.fs.frames[self.t_ref].images[tile.cam];
            let img_fwd = &self.fs.frames[self.t_ref + 1].images[tile.cam];
            let bounds = (
                cam.intrinsics.width as f64 - 1.0,
                cam.intrinsics.height as f64 - 1.0,
            );
            let rp_fwd = Reprojector::new(cam, &t_rel_fwd);
            // Per-ray dL/dw accumulators; the weight chain is closed once per
            // ray after smoothness folds in its contributions.
            let mut a_bufs: Vec<Option<Vec<f64>>> = vec![None; TILE_AREA];

            for (slot, entry) in tile.rays.iter().enumerate() {
                let Some(ray) = entry else { continue };
                let n = ray.rs.ts.len();
                let mut a = vec![0.0; n];
                let x0 = Vector2::new(ray.x as f64, ray.y as f64);

                if enabled.eik {
                    if let Some(gv) = &grad_vol {
                        eikonal_ray(&ray.rs, gv, eik_scale, &mut bd.eik, grads.as_deref_mut());
                    }
                }

                if ray.valid {
                    // Forward reprojection with flow: photometric term plus
                    // the dynamic-ray cue term share the projection loop.
                    if enabled.reproj || (enabled.flow && ray.dynamic) {
                        let src = source_patch(img_src, ray.x, ray.y);
                        for i in 0..n {
                            let wi = ray.rs.weights[i];
                            if wi < self.params.sample_skip {
                                continue;
                            }
                            let f3 = Vector3::new(
                                ray.flow_samples[i][0],
                                ray.flow_samples[i][1],
                                0.0,
                            );
                            let Ok((px, jac)) = rp_fwd.reproject_point(&ray.rs.points[i], &f3)
                            else {
                                continue;
                            };
                            if px.x < 0.0 || px.x > bounds.0 || px.y < 0.0 || px.y > bounds.1 {
                                continue;
                            }
                            if enabled.reproj {
                                if let (Some(srcp), Some((tgt, tgt_g))) =
                                    (src.as_ref(), target_patch(img_fwd, px.x, px.y))
                                {
                                    let (pe, dphi) = photometric_grad(srcp, &tgt, w.alpha_pm);
                                    bd.reproj += wi * pe / m_all;
                                    a[i] += pe / m_all;
                                    if let Some(g) = grads.as_deref_mut() {
                                        let mut dpx = [0.0; 2];
                                        for j in 0..27 {
                                            dpx[0] += dphi[j] * tgt_g[j][0];
                                            dpx[1] += dphi[j] * tgt_g[j][1];
                                        }
                                        scatter_flow_px(
                                            g,
                                            &ray.rs.stencils[i],
                                            &jac,
                                            &dpx,
                                            wi / m_all,
                                        );
                                    }
                                }
                            }
                            if enabled.flow && ray.dynamic {
                                if let Some(cue) = ray.cue_fwd {
                                    let r = [cue[0] - (px.x - x0.x), cue[1] - (px.y - x0.y)];
                                    let l = r[0].abs() + r[1].abs();
                                    bd.flow_dynamic += wi * l / m_all;
                                    let lam = w.lambda_flow * bd.gamma / m_all;
                                    a[i] += lam * l;
                                    if let Some(g) = grads.as_deref_mut() {
                                        let dpx = [-sign0(r[0]), -sign0(r[1])];
                                        scatter_flow_px(
                                            g,
                                            &ray.rs.stencils[i],
                                            &jac,
                                            &dpx,
                                            wi * lam,
                                        );
                                    }
                                }
                            }
                        }
                    }

                    // Static rays: cue terms with the flow contribution
                    // pinned to zero supervise geometry only.
                    if enabled.flow && !ray.dynamic {
                        if let Some(cue) = ray.cue_fwd {
                            bd.flow_static += self.static_flow_term(
                                &rp_fwd,
                                ray,
                                cue,
                                bounds,
                                w.lambda_flow / m_all,
                                &mut a,
                            ) / m_all;
                        }
                        if let Some((ta, cue)) = ray.bwd {
                            let t_rel_b = self.fs.relative_pose(self.t_ref, ta);
                            let rp_b = Reprojector::new(cam, &t_rel_b);
                            bd.flow_static += self.static_flow_term(
                                &rp_b,
                                ray,
                                cue,
                                bounds,
                                w.lambda_flow / m_all,
                                &mut a,
                            ) / m_all;
                        }
                    }

                    if enabled.dreg && !ray.dynamic {
                        let comp = ray.rendered_flow();
                        bd.dreg += (comp[0].abs() + comp[1].abs()) / m_s;
                        let sg = [sign0(comp[0]), sign0(comp[1])];
                        let lam = w.lambda_dreg / m_s;
                        for i in 0..n {
                            a[i] += lam
                                * (sg[0] * ray.flow_samples[i][0]
                                    + sg[1] * ray.flow_samples[i][1]);
                        }
                        if let Some(g) = grads.as_deref_mut() {
                            for i in 0..n {
                                let wi = ray.rs.weights[i];
                                scatter_flow(
                                    g,
                                    &ray.rs.stencils[i],
                                    [lam * wi * sg[0], lam * wi * sg[1]],
                                );
                            }
                        }
                    }
                }
                a_bufs[slot] = Some(a);
            }

            if enabled.smooth && n_smooth_tiles > 0 {
                if let Some(st) = tile_smooth_state(tile) {
                    let img_win =
                        |s: usize| img_src.pixel(tile.x0 + s % TILE, tile.y0 + s / TILE);
                    let ts = tile_smoothness(&img_win, &st);
                    smooth_sum += ts.value;
                    if let Some(g) = grads.as_deref_mut() {
                        let scale =
                            self.weights.lambda_smooth / (st.count * n_smooth_tiles) as f64;
                        // d* = d/mu: quotient rule couples every valid pixel
                        // of the tile through the mean.
                        let dot: f64 = (0..TILE_AREA)
                            .filter(|s| st.valid[*s])
                            .map(|s| ts.adj_dstar[s] * st.depth[s])
                            .sum();
                        for (slot, entry) in tile.rays.iter().enumerate() {
                            let (Some(ray), Some(a)) = (entry, a_bufs[slot].as_mut()) else {
                                continue;
                            };
                            if !st.valid[slot] {
                                continue;
                            }
                            let d_depth = scale
                                * (ts.adj_dstar[slot] / st.mu
                                    - dot / (st.mu * st.mu * st.nv as f64));
                            let af =
                                [scale * ts.adj_flow[slot][0], scale * ts.adj_flow[slot][1]];
                            for i in 0..ray.rs.ts.len() {
                                let wi = ray.rs.weights[i];
                                a[i] += d_depth * ray.cos_z * ray.rs.ts[i]
                                    + af[0] * ray.flow_samples[i][0]
                                    + af[1] * ray.flow_samples[i][1];
                                scatter_flow(
                                    g,
                                    &ray.rs.stencils[i],
                                    [af[0] * wi, af[1] * wi],
                                );
                            }
                        }
                    }
                }
            }

            // Close the weight chain: dL/dw -> dL/dalpha -> dL/d(sdf samples).
            if let Some(g) = grads.as_deref_mut() {
                for (slot, entry) in tile.rays.iter().enumerate() {
                    let (Some(ray), Some(a)) = (entry, &a_bufs[slot]) else {
                        continue;
                    };
                    scatter_weight_chain(&ray.rs, a, &mut g.sdf);
                }
            }
        }

        if n_smooth_tiles > 0 {
            bd.smooth = smooth_sum / n_smooth_tiles as f64;
        }

        if enabled.eik {
            if let Some(gv) = &grad_vol {
                for lr in &batch.lidar {
                    eikonal_ray(&lr.rs, gv, eik_scale, &mut bd.eik, grads.as_deref_mut());
                }
            }
            bd.eik /= n_eik.max(1) as f64;
            if let Some(g) = grads.as_deref_mut() {
                // One transpose closes every eikonal sample's chain at once.
                let GradientBuffers {
                    sdf: sdf_g,
                    grad_adj,
                    ..
                } = g;
                sdf_gradient_backward(&sdf.spec, grad_adj, sdf_g);
                grad_adj.data.fill(0.0);
            }
        }
        if enabled.range {
            bd.range = range_term(
                &batch.lidar,
                w.lambda_si,
                w.lambda_range,
                grads.as_deref_mut(),
            );
        }
        if enabled.hessian {
            bd.hessian = hessian_term(sdf, w.lambda_hess, grads.as_deref_mut());
        }
        bd
    }

    /// Per-sample L1 cue mismatch with the flow contribution pinned to zero.
    /// Adds (already lambda-scaled) dL/dw into `a`; returns the weighted sum.
    fn static_flow_term(
        &self,
        rp: &Reprojector,
        ray: &BatchRay,
        cue: [f64; 2],
        bounds: (f64, f64),
        lambda_eff: f64,
        a: &mut [f64],
    ) -> f64 {
        let x0 = Vector2::new(ray.x as f64, ray.y as f64);
        let zero = Vector3::zeros();
        let mut acc = 0.0;
        for i in 0..ray.rs.ts.len() {
            let wi = ray.rs.weights[i];
            if wi < self.params.sample_skip {
                continue;
            }
            let Ok((px, _)) = rp.reproject_point(&ray.rs.points[i], &zero) else {
                continue;
            };
            if px.x < 0.0 || px.x > bounds.0 || px.y < 0.0 || px.y > bounds.1 {
                continue;
            }
            let l = (cue[0] - (px.x - x0.x)).abs() + (cue[1] - (px.y - x0.y)).abs();
            acc += wi * l;
            a[i] += lambda_eff * l;
        }
        acc
    }
}

/// Scale-invariant log loss over valid LiDAR rays:
/// `mean(g^2) - lambda_si * (mean g)^2` with `g = log(rendered) - log(range)`.
/// Gradient (lambda_range applied) goes through the rendering weights.
pub(crate) fn range_term(
    lidar: &[LidarRay],
    lambda_si: f64,
    lambda_range: f64,
    grads: Option<&mut GradientBuffers>,
) -> f64 {
    let rays: Vec<&LidarRay> = lidar.iter().filter(|l| l.valid).collect();
    let m = rays.len();
    if m == 0 {
        return 0.0;
    }
    let g: Vec<f64> = rays
        .iter()
        .map(|l| l.rs.expected_t().ln() - l.range.ln())
        .collect();
    let mean_g = g.iter().sum::<f64>() / m as f64;
    let mean_g2 = g.iter().map(|v| v * v).sum::<f64>() / m as f64;
    if let Some(buf) = grads {
        for (lr, gi) in rays.iter().zip(&g) {
            let dl_dg = lambda_range * 2.0 * (gi - lambda_si * mean_g) / m as f64;
            let dl_dr = dl_dg / lr.rs.expected_t();
            let a: Vec<f64> = lr.rs.ts.iter().map(|t| dl_dr * t).collect();
            scatter_weight_chain(&lr.rs, &a, &mut buf.sdf);
        }
    }
    mean_g2 - lambda_si * mean_g * mean_g
}

/// Mean absolute second difference over interior voxels, all six channels.
/// Gradient (lambda applied) via the exact stencil transpose.
pub(crate) fn hessian_term(
    sdf: &ScalarField,
    lambda_hess: f64,
    grads: Option<&mut GradientBuffers>,
) -> f64 {
    let [nx, ny, nz] = sdf.spec.dims;
    if nx < 3 || ny < 3 || nz < 3 {
        return 0.0;
    }
    let count = ((nx - 2) * (ny - 2) * (nz - 2) * 6) as f64;
    let hh = sdf_second_differences(sdf);
    let mut sum = 0.0;
    match grads {
        None => {
            for i in 1..nx - 1 {
                for j in 1..ny - 1 {
                    for k in 1..nz - 1 {
                        sum += hh.at(i, j, k).iter().map(|v| v.abs()).sum::<f64>();
                    }
                }
            }
        }
        Some(buf) => {
            let scale = lambda_hess / count;
            for i in 1..nx - 1 {
                for j in 1..ny - 1 {
                    for k in 1..nz - 1 {
                        let vals = hh.at(i, j, k);
                        let mut adj = [0.0; 6];
                        for c in 0..6 {
                            sum += vals[c].abs();
                            adj[c] = sign0(vals[c]) * scale;
                        }
                        buf.hess_adj.at_mut(i, j, k).copy_from_slice(&adj);
                    }
                }
            }
            let GradientBuffers {
                sdf: sdf_g,
                hess_adj,
                ..
            } = buf;
            sdf_second_differences_backward(&sdf.spec, hess_adj, sdf_g);
            hess_adj.data.fill(0.0);
        }
    }
    sum / count
}

/// Eikonal residual at every sample of one ray; scatters d/d(gradient volume)
/// into the adjoint volume. `scale` carries lambda and the 1/N mean factor;
/// `acc` receives the raw residual sum (caller divides by N).
fn eikonal_ray(
    rs: &RaySample,
    grad_vol: &FeatureVolume,
    scale: f64,
    acc: &mut f64,
    grads: Option<&mut GradientBuffers>,
) {
    let mut g3 = [0.0; 3];
    match grads {
        None => {
            for st in &rs.stencils {
                grad_vol.sample_stencil_into(st, &mut g3);
                let nrm = (g3[0] * g3[0] + g3[1] * g3[1] + g3[2] * g3[2]).sqrt();
                let r = 1.0 - nrm;
                *acc += r * r;
            }
        }
        Some(buf) => {
            for st in &rs.stencils {
                grad_vol.sample_stencil_into(st, &mut g3);
                let nrm = (g3[0] * g3[0] + g3[1] * g3[1] + g3[2] * g3[2]).sqrt();
                let r = 1.0 - nrm;
                *acc += r * r;
                if nrm < 1e-12 {
                    continue; // norm kink at zero: subgradient 0
                }
                let c = scale * (-2.0) * r / nrm;
                for corner in 0..8 {
                    let at = st.idx[corner] * 3;
                    let wc = st.w[corner];
                    buf.grad_adj.data[at] += c * g3[0] * wc;
                    buf.grad_adj.data[at + 1] += c * g3[1] * wc;
                    buf.grad_adj.data[at + 2] += c * g3[2] * wc;
                }
            }
        }
    }
}

/// Per-pixel inputs of one tile's smoothness term, derived from batch state.
pub(crate) struct TileSmoothState {
    pub depth: [f64; TILE_AREA],
    pub flow: [[f64; 2]; TILE_AREA],
    pub valid: [bool; TILE_AREA],
    /// Mean depth over valid pixels (the normalizer).
    pub mu: f64,
    pub nv: usize,
    /// Locations whose x- and y-forward differences both exist.
    pub count: usize,
}

/// `None` when the tile cannot contribute (no valid pixels, non-positive mean
/// depth, or no complete difference location).
pub(crate) fn tile_smooth_state(tile: &BatchTile) -> Option<TileSmoothState> {
    let mut depth = [0.0; TILE_AREA];
    let mut flow = [[0.0; 2]; TILE_AREA];
    let mut valid = [false; TILE_AREA];
    for (slot, entry) in tile.rays.iter().enumerate() {
        let Some(ray) = entry else { continue };
        depth[slot] = ray.depth();
        flow[slot] = ray.rendered_flow();
        valid[slot] = ray.valid;
    }
    state_from_parts(depth, flow, valid)
}

pub(crate) fn state_from_parts(
    depth: [f64; TILE_AREA],
    flow: [[f64; 2]; TILE_AREA],
    valid: [bool; TILE_AREA],
) -> Option<TileSmoothState> {
    let nv = valid.iter().filter(|v| **v).count();
    if nv == 0 {
        return None;
    }
    let mu = valid
        .iter()
        .zip(&depth)
        .filter(|(v, _)| **v)
        .map(|(_, d)| d)
        .sum::<f64>()
        / nv as f64;
    if !(mu > 0.0) {
        return None;
    }
    let mut count = 0usize;
    for dy in 0..TILE - 1 {
        for dx in 0..TILE - 1 {
            let s = dy * TILE + dx;
            if valid[s] && valid[s + 1] && valid[s + TILE] {
                count += 1;
            }
        }
    }
    if count == 0 {
        return None;
    }
    Some(TileSmoothState {
        depth,
        flow,
        valid,
        mu,
        nv,
        count,
    })
}

pub(crate) struct TileSmooth {
    /// Mean over difference locations of the edge-weighted penalty.
    pub value: f64,
    /// d(value * count)/d(normalized depth), per pixel.
    pub adj_dstar: [f64; TILE_AREA],
    /// d(value * count)/d(rendered flow), per pixel and channel.
    pub adj_flow: [[f64; 2]; TILE_AREA],
}

/// Edge-aware first-difference penalty over one tile: mean-normalized depth
/// plus both raw flow channels, each difference damped by exp(-|image
/// gradient|) with the image gradient averaged over RGB. `img_win` maps a
/// tile slot to its RGB pixel.
pub(crate) fn tile_smoothness(
    img_win: &dyn Fn(usize) -> [f64; 3],
    st: &TileSmoothState,
) -> TileSmooth {
    let edge = |p: usize, q: usize| -> f64 {
        let (a, b) = (img_win(p), img_win(q));
        let g = ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0;
        (-g).exp()
    };
    let mut sum = 0.0;
    let mut adj_dstar = [0.0; TILE_AREA];
    let mut adj_flow = [[0.0; 2]; TILE_AREA];
    for dy in 0..TILE - 1 {
        for dx in 0..TILE - 1 {
            let s = dy * TILE + dx;
            let (sx, sy) = (s + 1, s + TILE);
            if !(st.valid[s] && st.valid[sx] && st.valid[sy]) {
                continue;
            }
            let (ex, ey) = (edge(s, sx), edge(s, sy));
            let ddx = (st.depth[sx] - st.depth[s]) / st.mu;
            let ddy = (st.depth[sy] - st.depth[s]) / st.mu;
            sum += ddx.abs() * ex + ddy.abs() * ey;
            adj_dstar[sx] += sign0(ddx) * ex;
            adj_dstar[s] -= sign0(ddx) * ex;
            adj_dstar[sy] += sign0(ddy) * ey;
            adj_dstar[s] -= sign0(ddy) * ey;
            for c in 0..2 {
                let fdx = st.flow[sx][c] - st.flow[s][c];
                let fdy = st.flow[sy][c] - st.flow[s][c];
                sum += fdx.abs() * ex + fdy.abs() * ey;
                adj_flow[sx][c] += sign0(fdx) * ex;
                adj_flow[s][c] -= sign0(fdx) * ex;
                adj_flow[sy][c] += sign0(fdy) * ey;
                adj_flow[s][c] -= sign0(fdy) * ey;
            }
        }
    }
    TileSmooth {
        value: sum / st.count as f64,
        adj_dstar,
        adj_flow,
    }
}

/// dL/dw -> dL/dalpha -> dL/d(sdf samples) -> grid scatter for one ray.
fn scatter_weight_chain(rs: &RaySample, dl_dw: &[f64], sdf_grad: &mut [f64]) {
    if dl_dw.iter().all(|v| *v == 0.0) {
        return;
    }
    let dl_da = weights_backward(&rs.alphas, dl_dw);
    let n = dl_da.len();
    let mut dl_ds = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        dl_ds[i] += dl_da[i] * rs.alpha_d_lo[i];
        dl_ds[i + 1] += dl_da[i] * rs.alpha_d_hi[i];
    }
    rs.scatter_sdf_adjoint(&dl_ds, sdf_grad);
}

/// Chains a pixel-space adjoint through the reprojection Jacobian into the
/// two horizontal flow channels and scatters it.
fn scatter_flow_px(
    g: &mut GradientBuffers,
    st: &TrilinearStencil,
    jac: &nalgebra::Matrix2x3<f64>,
    dpx: &[f64; 2],
    scale: f64,
) {
    let df = [
        scale * (dpx[0] * jac[(0, 0)] + dpx[1] * jac[(1, 0)]),
        scale * (dpx[0] * jac[(0, 1)] + dpx[1] * jac[(1, 1)]),
    ];
    scatter_flow(g, st, df);
}

#[inline]
fn scatter_flow(g: &mut GradientBuffers, st: &TrilinearStencil, df: [f64; 2]) {
    if df[0] == 0.0 && df[1] == 0.0 {
        return;
    }
    for c in 0..8 {
        let at = st.idx[c] * 2;
        g.flow[at] += df[0] * st.w[c];
        g.flow[at + 1] += df[1] * st.w[c];
    }
}
