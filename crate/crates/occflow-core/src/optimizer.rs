//! Two-stage field fitting: AdamW over the dense SDF and flow grids, driven
//! by batches from [`crate::supervision`].
//!
//! Stage 1 fits geometry alone (flow terms silent, flow grid frozen); stage 2
//! turns on dynamic classification, cue supervision, and flow updates. The
//! whole run is deterministic for a fixed seed: one ChaCha stream feeds batch
//! assembly, and every update is plain sequential f64 arithmetic.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::geometry::{aabb_clip, Ray};
use crate::grid::{GridSpec, ScalarField, VectorField};
use crate::supervision::{
    BatchConfig, GradientBuffers, LossBreakdown, LossToggles, RayBatch, Supervisor,
};
use crate::Result;

/// Learning-rate drops: at these fractions of the run, multiply by the factor.
const LR_MILESTONES: [(f64, f64); 2] = [(0.7, 0.1), (0.9, 0.1)];

/// Fit-loop hyperparameters. The defaults mirror the full-scale training
/// recipe; synthetic-scene presets override the optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub total_iters: usize,
    /// Fraction of iterations spent in stage 1 (ignored without `two_stage`).
    pub stage1_fraction: f64,
    /// Pixel tiles per iteration (64 rays each).
    pub n_tiles: usize,
    /// LiDAR rays per iteration (0 disables range supervision).
    pub n_lidar: usize,
    /// Spread of the auxiliary-frame draw for backward cues, ego meters.
    pub sigma_aux: f64,
    pub lr: f64,
    /// Flow-grid learning rate is `lr * flow_lr_scale`: the flow field starts
    /// at zero and only sees gradients on dynamic rays, so it usually wants a
    /// hotter rate than SDF refinement.
    pub flow_lr_scale: f64,
    pub weight_decay: f64,
    /// Linear warmup length in iterations (0 disables).
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Geometry-only stage 1, then joint stage 2. Off = joint from the start.
    pub two_stage: bool,
    /// Classify rays dynamic/static; off treats every cued ray as dynamic.
    pub dynamic_disentanglement: bool,
    /// Supervise static rays against backward cues to earlier frames.
    pub backward_flow: bool,
    /// Seed the SDF by carving the reference-frame LiDAR sweep; off (or no
    /// sweep) starts from [`far_wall_init`].
    pub lidar_init: bool,
    pub seed: u64,
    /// Emit a progress line to stderr every this many iterations (0 = quiet).
    pub log_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            total_iters: 4000,
            stage1_fraction: 0.5,
            n_tiles: 8,
            n_lidar: 256,
            sigma_aux: 0.5,
            lr: 1e-4,
            flow_lr_scale: 1.0,
            weight_decay: 0.01,
            warmup: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            two_stage: true,
            dynamic_disentanglement: true,
            backward_flow: true,
            lidar_init: true,
            seed: 0,
            log_every: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return Err(Error::Config(format!(
                "stage1_fraction must lie in [0,1], got {}",
                self.stage1_fraction
            )));
        }
        if self.n_tiles == 0 {
            return Err(Error::Config("n_tiles must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.flow_lr_scale > 0.0 && self.flow_lr_scale.is_finite()) {
            return Err(Error::Config(format!(
                "flow_lr_scale must be positive, got {}",
                self.flow_lr_scale
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(self.sigma_aux >= 0.0) {
            return Err(Error::Config("sigma_aux must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam with bias correction.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(theta.len(), self.m.len(), "optimizer size mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient size mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * (self.weight_decay * theta[i] + m_hat / (v_hat.sqrt() + self.eps));
        }
    }
}

/// Warmup plus milestone-decay schedule.
pub fn lr_at(cfg: &FitConfig, iter: usize) -> f64 {
    let mut lr = cfg.lr;
    if iter < cfg.warmup {
        lr *= (iter + 1) as f64 / cfg.warmup as f64;
    }
    for (frac, factor) in LR_MILESTONES {
        if iter >= (cfg.total_iters as f64 * frac) as usize {
            lr *= factor;
        }
    }
    lr
}

/// Free-space initialization: a signed distance that stays positive through
/// the volume and crosses zero exactly at the far x plane, so forward-looking
/// rays see one clean surface from the first iteration.
pub fn far_wall_init(spec: &GridSpec) -> ScalarField {
    let (_, hi) = spec.aabb();
    let far_x = hi[0];
    ScalarField::from_fn(spec.clone(), |p| far_x - p.x)
}

/// Carve half-width of [`lidar_carve_init`], meters.
pub const LIDAR_INIT_TRUNC: f64 = 0.6;

/// Seeds the SDF from one LiDAR sweep: along every beam, nodes get the
/// beam-projective signed distance `range - t` clamped to `±trunc`
/// (trilinearly splatted and averaged), so returns leave a zero crossing
/// within a truncation band and traversed space starts free. Nodes no beam
/// touches fall back to height above the ego ground plane, which keeps the
/// near field and sky sensible without any return there. Sweep points and
/// `origin` must be in the grid's ego frame.
///
/// Narrow-band fitting cannot walk a crossing across meters of saturated
/// free space, so starting within a voxel or two of the true surface is what
/// makes the later refinement converge.
pub fn lidar_carve_init(
    spec: &GridSpec,
    origin: &Vector3<f64>,
    points: &[Vector3<f64>],
    trunc: f64,
) -> ScalarField {
    assert!(trunc > 0.0, "truncation must be positive");
    let n = spec.n_voxels();
    let mut val = vec![0.0f64; n];
    let mut wsum = vec![0.0f64; n];
    let (lo, hi) = spec.aabb();
    let step = 0.5 * spec.voxel_size.iter().copied().fold(f64::INFINITY, f64::min);
    for p in points {
        let range = (p - origin).norm();
        let Ok(ray) = Ray::new(*origin, p - origin) else {
            continue;
        };
        let Some((t0, t1)) = aabb_clip(&ray, &lo, &hi) else {
            continue;
        };
        let (t0, t1) = (t0.max(0.0), t1.min(range + trunc));
        if !(t1 > t0) {
            continue;
        }
        let n_steps = (((t1 - t0) / step).ceil() as usize).max(1);
        for i in 0..=n_steps {
            let t = t0 + (t1 - t0) * i as f64 / n_steps as f64;
            let cand = (range - t).clamp(-trunc, trunc);
            let st = spec.trilinear_stencil(&ray.at(t));
            for (idx, w) in st.idx.iter().zip(st.w) {
                val[*idx] += w * cand;
                wsum[*idx] += w;
            }
        }
    }
    let mut field = ScalarField::from_fn(spec.clone(), |p| p.z);
    for i in 0..n {
        if wsum[i] > 0.0 {
            field.data[i] = val[i] / wsum[i];
        }
    }
    field
}

/// One iteration's record in the fit log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterStats {
    pub iter: usize,
    pub stage: u8,
    pub lr: f64,
    pub total: f64,
    pub breakdown: LossBreakdown,
}

/// Fitted fields plus the per-iteration loss log.
pub struct FitResult {
    pub sdf: ScalarField,
    pub flow: VectorField,
    pub history: Vec<IterStats>,
}

/// Without disentanglement every cued valid ray gets the dynamic treatment:
/// no static/dynamic split, gamma collapses toward 1, backward cues unused.
fn mark_all_dynamic(batch: &mut RayBatch) {
    let mut m_d = 0;
    for tile in &mut batch.tiles {
        for ray in tile.rays.iter_mut().flatten() {
            ray.dynamic = ray.valid && ray.cue_fwd.is_some();
            ray.bwd = None;
            if ray.dynamic {
                m_d += 1;
            }
        }
    }
    batch.m_d = m_d;
}

/// Runs the fit from scratch on the given lattice and returns the fields.
pub fn fit(sup: &Supervisor, spec: &GridSpec, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let stage1_iters = if cfg.two_stage {
        ((cfg.total_iters as f64) * cfg.stage1_fraction).round() as usize
    } else {
        0
    };
    if stage1_iters < cfg.total_iters {
        // The flow stage cannot run without forward cues on the fit frame.
        let frame = &sup.fs.frames[sup.t_ref];
        if frame.cue_forward.iter().any(|c| c.is_none()) {
            return Err(Error::MissingFlowCues);
        }
    }

    let ref_sweep = &sup.fs.frames[sup.t_ref].lidar;
    let mut sdf = if cfg.lidar_init && !ref_sweep.is_empty() {
        let origin = sup.fs.lidar_origin.unwrap_or_else(Vector3::zeros);
        lidar_carve_init(spec, &origin, ref_sweep, LIDAR_INIT_TRUNC)
    } else {
        far_wall_init(spec)
    };
    let mut flow = VectorField::new_zero(spec.clone());
    let mut grads = GradientBuffers::new(spec);
    let mut opt_sdf = AdamW::new(
        sdf.data.len(),
        cfg.beta1,
        cfg.beta2,
        cfg.eps,
        cfg.weight_decay,
    );
    let mut opt_flow = AdamW::new(
        flow.data.len(),
        cfg.beta1,
        cfg.beta2,
        cfg.eps,
        cfg.weight_decay,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.total_iters);

    for iter in 0..cfg.total_iters {
        let stage2 = iter >= stage1_iters;
        let toggles = if stage2 {
            LossToggles::all()
        } else {
            LossToggles::stage1()
        };
        let bcfg = BatchConfig {
            n_tiles: cfg.n_tiles,
            n_lidar: cfg.n_lidar,
            sigma_aux: cfg.sigma_aux,
            stage2: stage2 && cfg.dynamic_disentanglement,
            use_backward: cfg.backward_flow,
        };
        let mut batch = sup.assemble_batch(&sdf, &flow, &bcfg, &mut rng)?;
        if stage2 && !cfg.dynamic_disentanglement {
            mark_all_dynamic(&mut batch);
        }
        grads.clear();
        let bd = sup.evaluate(&batch, &sdf, &flow, &toggles, Some(&mut grads));
        grads.check_finite(iter)?;
        let lr = lr_at(cfg, iter);
        opt_sdf.step(&mut sdf.data, &grads.sdf, lr);
        if stage2 {
            opt_flow.step(&mut flow.data, &grads.flow, lr * cfg.flow_lr_scale);
        }
        let stats = IterStats {
            iter,
            stage: if stage2 { 2 } else { 1 },
            lr,
            total: bd.total(&sup.weights),
            breakdown: bd,
        };
        if cfg.log_every > 0 && (iter % cfg.log_every == 0 || iter + 1 == cfg.total_iters) {
            eprintln!(
                "iter {:5} stage {} lr {:.3e} total {:.6} reproj {:.6} flow_s {:.6} \
                 flow_d {:.6} range {:.6} eik {:.6} hess {:.6} smooth {:.6} dreg {:.6} gamma {:.2}",
                stats.iter,
                stats.stage,
                stats.lr,
                stats.total,
                bd.reproj,
                bd.flow_static,
                bd.flow_dynamic,
                bd.range,
                bd.eik,
                bd.hessian,
                bd.smooth,
                bd.dreg,
                bd.gamma
            );
        }
        history.push(stats);
    }
    Ok(FitResult { sdf, flow, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Camera, FrameData, FrameSet, Intrinsics, RigidTransform};
    use crate::maps::{FlowMap, ImageRgb, MaskMap};
    use crate::renderer::RenderParams;
    use crate::supervision::LossWeights;
    use nalgebra::{Matrix3, Vector3};
    use rand::Rng;
    use std::collections::BTreeMap;
    use std::time::Instant;

    const W: usize = 24;
    const H: usize = 24;

    /// Globally linear image: bilinear resampling of it is exact and smooth,
    /// which keeps finite differences clean across the photometric path.
    fn ramp_image(base: [f64; 3], gx: [f64; 3], gy: [f64; 3]) -> ImageRgb {
        let mut img = ImageRgb::new(W, H);
        for y in 0..H {
            for x in 0..W {
                let px = [0, 1, 2]
                    .map(|c| base[c] + gx[c] * x as f64 + gy[c] * y as f64);
                img.set_pixel(x, y, px);
            }
        }
        img
    }

    fn random_flow_map(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> FlowMap {
        let mut m = FlowMap::new(W, H);
        for y in 0..H {
            for x in 0..W {
                let mag = rng.gen_range(lo..hi);
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                m.set(x, y, [mag * ang.cos(), mag * ang.sin()]);
            }
        }
        m
    }

    fn blob_center() -> Vector3<f64> {
        Vector3::new(1.35, 0.0, -0.05)
    }

    /// Points on the sensor-facing side of the blob, kept close to head-on so
    /// none of the rays graze the surface.
    fn lidar_points(rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        let c = blob_center();
        (0..8)
            .map(|_| {
                let u = Vector3::new(
                    rng.gen_range(-1.0..-0.75),
                    rng.gen_range(-0.35..0.35),
                    rng.gen_range(-0.35..0.35),
                )
                .normalize();
                c + 0.45 * u
            })
            .collect()
    }

    /// Three frames, one forward-looking camera, striped movable mask, random
    /// cue maps, LiDAR on the reference frame. Small enough for dense
    /// finite-difference sweeps.
    fn tiny_frameset(seed: u64) -> FrameSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // cam z -> ego +x, cam x -> ego -y, cam y -> ego -z
        let r = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let cam = Camera {
            intrinsics: Intrinsics::new(26.0, 26.0, 11.5, 11.5, W, H).unwrap(),
            cam_to_ego: RigidTransform::new(r, Vector3::zeros()).unwrap(),
        };
        let mut frames = Vec::new();
        for t in 0..3usize {
            let tf = t as f64;
            let ego_to_world = RigidTransform::from_translation(Vector3::new(
                0.16 * tf,
                0.05 * tf,
                0.01 * tf,
            ));
            let images = vec![ramp_image(
                [0.45 + 0.04 * tf, 0.40 - 0.03 * tf, 0.50 + 0.02 * tf],
                [0.009 - 0.002 * tf, -0.006, 0.004],
                [-0.005, 0.008 + 0.001 * tf, -0.007],
            )];
            let mut movable = MaskMap::new(W, H);
            for y in 0..H {
                for x in 0..W {
                    movable.set(x, y, (x / 3) % 2 == 1);
                }
            }
            let mut bw = BTreeMap::new();
            if t == 1 {
                bw.insert(0usize, random_flow_map(&mut rng, 0.4, 1.6));
            }
            frames.push(FrameData {
                ego_to_world,
                images,
                movable: vec![movable],
                cue_forward: vec![Some(random_flow_map(&mut rng, 0.4, 1.6))],
                cue_backward: vec![bw],
                gt_depth: vec![None],
                gt_flow: vec![None],
                lidar: if t == 1 { lidar_points(&mut rng) } else { vec![] },
            });
        }
        FrameSet {
            cameras: vec![cam],
            frames,
            delta_t: 0.1,
            lidar_origin: Some(Vector3::zeros()),
        }
    }

    fn tiny_spec() -> GridSpec {
        GridSpec::new([8, 8, 8], [0.6, -0.7, -0.75], [0.2, 0.2, 0.2]).unwrap()
    }

    /// Blob SDF with per-voxel noise plus a generic random flow field: a
    /// generic point in parameter space, away from loss kinks.
    fn gradcheck_fields(seed: u64) -> (ScalarField, VectorField) {
        let spec = tiny_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = blob_center();
        let mut sdf = ScalarField::from_fn(spec.clone(), |p| (p - c).norm() - 0.45);
        for v in &mut sdf.data {
            *v += rng.gen_range(-0.05..0.05);
        }
        let mut flow = VectorField::new_zero(spec);
        for v in &mut flow.data {
            *v = rng.gen_range(-0.25..0.25);
        }
        (sdf, flow)
    }

    fn fd_params() -> RenderParams {
        RenderParams {
            xi: 14.0,
            n_samples: 32,
            weight_threshold: 0.05,
            // Keep every sample in the analytic gradient so it matches the
            // finite difference exactly.
            sample_skip: 0.0,
        }
    }

    fn retain_first_rays(batch: &mut RayBatch, keep: usize) {
        let tile = &mut batch.tiles[0];
        for slot in keep..tile.rays.len() {
            tile.rays[slot] = None;
        }
        let mut m_all = 0;
        let mut m_d = 0;
        for ray in tile.rays.iter().flatten() {
            if ray.valid {
                m_all += 1;
                if ray.dynamic {
                    m_d += 1;
                }
            }
        }
        batch.m_all = m_all;
        batch.m_d = m_d;
    }

    struct Worst {
        rel: f64,
        what: String,
    }

    fn fd_check(worst: &mut Worst, analytic: f64, fd: f64, what: &str) {
        let err = (analytic - fd).abs();
        let tol = f64::max(1e-7, 1e-4 * analytic.abs().max(fd.abs()));
        let rel = err / tol;
        if rel > worst.rel {
            worst.rel = rel;
            worst.what = format!("{what}: analytic {analytic:.9e} fd {fd:.9e}");
        }
    }

    /// Central finite differences over every SDF voxel and flow channel
    /// against the analytic gradient of the toggled term.
    fn fd_sweep(
        sup: &Supervisor,
        batch: &mut RayBatch,
        sdf: &mut ScalarField,
        flow: &mut VectorField,
        params: &RenderParams,
        toggles: &LossToggles,
        name: &str,
    ) -> Worst {
        let mut g = GradientBuffers::new(&sdf.spec);
        batch.refresh(sdf, flow, params);
        sup.evaluate(batch, sdf, flow, toggles, Some(&mut g));
        let mut worst = Worst {
            rel: 0.0,
            what: String::new(),
        };
        let h = 1e-4;
        let probe = |batch: &mut RayBatch, sdf: &mut ScalarField, flow: &mut VectorField| {
            batch.refresh(sdf, flow, params);
            sup.evaluate(batch, sdf, flow, toggles, None).total(&sup.weights)
        };
        for idx in 0..sdf.data.len() {
            let orig = sdf.data[idx];
            sdf.data[idx] = orig + h;
            let lp = probe(batch, sdf, flow);
            sdf.data[idx] = orig - h;
            let lm = probe(batch, sdf, flow);
            sdf.data[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            fd_check(&mut worst, g.sdf[idx], fd, &format!("{name} sdf[{idx}]"));
        }
        for idx in 0..flow.data.len() {
            let orig = flow.data[idx];
            flow.data[idx] = orig + h;
            let lp = probe(batch, sdf, flow);
            flow.data[idx] = orig - h;
            let lm = probe(batch, sdf, flow);
            flow.data[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            fd_check(&mut worst, g.flow[idx], fd, &format!("{name} flow[{idx}]"));
        }
        worst
    }

    #[test]
    fn analytic_gradients_match_finite_differences_per_term() {
        let t0 = Instant::now();
        let fs = tiny_frameset(3);
        let (mut sdf, mut flow) = gradcheck_fields(4);
        let params = fd_params();
        let weights = LossWeights {
            theta_d: 0.8,
            ..LossWeights::default()
        };
        let sup = Supervisor::new(&fs, 1, params, weights).unwrap();
        let bcfg = BatchConfig {
            n_tiles: 1,
            n_lidar: 8,
            sigma_aux: 0.3,
            stage2: true,
            use_backward: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut batch = sup.assemble_batch(&sdf, &flow, &bcfg, &mut rng).unwrap();
        retain_first_rays(&mut batch, 16);
        // The reduced batch must still exercise every loss path.
        assert!(batch.m_d >= 2, "need dynamic rays, got {}", batch.m_d);
        assert!(batch.m_s() >= 2, "need static rays, got {}", batch.m_s());
        assert!(
            batch.tiles[0]
                .rays
                .iter()
                .flatten()
                .any(|r| r.bwd.is_some()),
            "need at least one backward cue"
        );
        assert!(
            batch.lidar.iter().filter(|l| l.valid).count() >= 3,
            "need valid lidar rays"
        );

        // The Hessian term gets its own generic point: an exponential field
        // has every discrete second difference bounded away from zero (with
        // channel signs mixed through the coefficient signs), so an h-probe
        // can never flip an absolute value mid-difference.
        let mut hess_sdf = ScalarField::from_fn(sdf.spec.clone(), |p| {
            0.35 * (0.9 * p.x - 0.7 * p.y + 0.5 * p.z).exp()
        });

        let terms: [(&str, LossToggles); 7] = [
            ("reproj", LossToggles { reproj: true, ..LossToggles::none() }),
            ("flow", LossToggles { flow: true, ..LossToggles::none() }),
            ("range", LossToggles { range: true, ..LossToggles::none() }),
            ("eik", LossToggles { eik: true, ..LossToggles::none() }),
            ("hessian", LossToggles { hessian: true, ..LossToggles::none() }),
            ("smooth", LossToggles { smooth: true, ..LossToggles::none() }),
            ("dreg", LossToggles { dreg: true, ..LossToggles::none() }),
        ];
        for (name, toggles) in &terms {
            let field = if *name == "hessian" { &mut hess_sdf } else { &mut sdf };
            let worst = fd_sweep(&sup, &mut batch, field, &mut flow, &params, toggles, name);
            assert!(
                worst.rel <= 1.0,
                "term {name}: worst relative error {:.3e}x tolerance at {}",
                worst.rel,
                worst.what
            );
        }
        let elapsed = t0.elapsed().as_secs_f64();
        assert!(elapsed < 30.0, "gradient check took {elapsed:.1}s");
    }

    #[test]
    fn gradients_scale_linearly_with_term_weights() {
        let fs = tiny_frameset(3);
        let (sdf, flow) = gradcheck_fields(4);
        let params = fd_params();
        let base = LossWeights {
            theta_d: 0.8,
            ..LossWeights::default()
        };
        let mut tripled = base;
        tripled.lambda_eik *= 3.0;
        let sup1 = Supervisor::new(&fs, 1, params, base).unwrap();
        let sup3 = Supervisor::new(&fs, 1, params, tripled).unwrap();
        let bcfg = BatchConfig {
            n_tiles: 1,
            n_lidar: 8,
            sigma_aux: 0.3,
            stage2: true,
            use_backward: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = sup1.assemble_batch(&sdf, &flow, &bcfg, &mut rng).unwrap();
        let toggles = LossToggles {
            eik: true,
            ..LossToggles::none()
        };
        let mut g1 = GradientBuffers::new(&sdf.spec);
        let mut g3 = GradientBuffers::new(&sdf.spec);
        sup1.evaluate(&batch, &sdf, &flow, &toggles, Some(&mut g1));
        sup3.evaluate(&batch, &sdf, &flow, &toggles, Some(&mut g3));
        let mut nonzero = 0;
        for (a, b) in g1.sdf.iter().zip(&g3.sdf) {
            assert!((b - 3.0 * a).abs() <= 1e-12 * a.abs().max(1.0));
            if *a != 0.0 {
                nonzero += 1;
            }
        }
        assert!(nonzero > 10, "eikonal gradient unexpectedly sparse");
    }

    #[test]
    fn adamw_zero_gradient_applies_only_decay() {
        let mut opt = AdamW::new(1, 0.9, 0.999, 1e-8, 0.1);
        let mut theta = [0.7];
        opt.step(&mut theta, &[0.0], 0.01);
        assert!((theta[0] - 0.7 * (1.0 - 0.001)).abs() < 1e-15);
        opt.step(&mut theta, &[0.0], 0.01);
        assert!((theta[0] - 0.7 * (1.0 - 0.001) * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_signed_learning_rate() {
        // Bias correction makes the first update lr * g / (|g| + eps).
        let mut opt = AdamW::new(2, 0.9, 0.999, 1e-8, 0.0);
        let mut theta = [1.0, -2.0];
        opt.step(&mut theta, &[0.5, -0.03], 0.01);
        assert!((theta[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((theta[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adamw_constant_gradient_moves_at_learning_rate() {
        // With a constant gradient, m_hat = g and v_hat = g^2 at every step.
        let mut opt = AdamW::new(1, 0.9, 0.999, 1e-8, 0.0);
        let mut theta = [1.0];
        for _ in 0..3 {
            opt.step(&mut theta, &[0.2], 0.1);
        }
        assert!((theta[0] - 0.7).abs() < 1e-6, "{}", theta[0]);
    }

    #[test]
    fn lr_schedule_has_warmup_and_two_drops() {
        let cfg = FitConfig {
            total_iters: 100,
            warmup: 10,
            lr: 1.0,
            ..FitConfig::default()
        };
        assert!((lr_at(&cfg, 0) - 0.1).abs() < 1e-12);
        assert!((lr_at(&cfg, 4) - 0.5).abs() < 1e-12);
        assert!((lr_at(&cfg, 9) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 69) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 70) - 0.1).abs() < 1e-12);
        assert!((lr_at(&cfg, 90) - 0.01).abs() < 1e-12);
        assert!((lr_at(&cfg, 99) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn far_wall_init_is_linear_free_space() {
        let spec = tiny_spec();
        let sdf = far_wall_init(&spec);
        let (_, hi) = spec.aabb();
        // Positive at every voxel center; the zero crossing sits on the far
        // aabb face, half a voxel beyond the last sample.
        let min = sdf.data.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0);
        assert!((min - 0.5 * spec.voxel_size[0]).abs() < 1e-12, "min {min}");
        // Trilinear interpolation of a linear field is exact.
        let p = Vector3::new(1.1, 0.0, -0.1);
        let st = spec.trilinear_stencil(&p);
        assert!((sdf.sample_stencil(&st) - (hi[0] - 1.1)).abs() < 1e-12);
    }

    #[test]
    fn lidar_carve_leaves_a_crossing_at_the_return() {
        let spec = GridSpec::new([8, 8, 8], [0.0, 0.0, 0.0], [0.5, 0.5, 0.5]).unwrap();
        // One beam along +x through the voxel-center row y = z = 1.75,
        // returning at x = 2.75 (range 3.75 from the outside origin).
        let origin = Vector3::new(-1.0, 1.75, 1.75);
        let hit = Vector3::new(2.75, 1.75, 1.75);
        let field = lidar_carve_init(&spec, &origin, &[hit], 0.5);
        let at = |i: usize| field.data[spec.index(i, 3, 3)];
        // Free space along the beam sits at the truncation bound.
        for i in 0..4 {
            assert!((at(i) - 0.5).abs() < 1e-9, "node {i}: {}", at(i));
        }
        // The band brackets the return: near zero at the hit voxel, clearly
        // negative one voxel behind, clearly positive one voxel in front.
        assert!(at(4) > 0.35, "front of band: {}", at(4));
        assert!(at(5).abs() < 0.15, "hit voxel: {}", at(5));
        assert!(at(6) < -0.3, "behind surface: {}", at(6));
        // Past the carve the ground prior takes over (height above z = 0).
        assert!((at(7) - 1.75).abs() < 1e-12, "untouched: {}", at(7));
        assert!((field.data[spec.index(0, 0, 0)] - 0.25).abs() < 1e-12);
        // Off-beam rows are untouched everywhere.
        assert!((field.data[spec.index(5, 0, 6)] - 3.25).abs() < 1e-12);
    }

    fn tiny_fit_cfg(iters: usize) -> FitConfig {
        FitConfig {
            total_iters: iters,
            stage1_fraction: 0.5,
            n_tiles: 1,
            n_lidar: 4,
            sigma_aux: 0.3,
            lr: 0.02,
            weight_decay: 0.0,
            warmup: 5,
            seed: 11,
            ..FitConfig::default()
        }
    }

    fn tiny_supervisor(fs: &FrameSet) -> Supervisor<'_> {
        let params = RenderParams::new(14.0, 24);
        let weights = LossWeights {
            theta_d: 0.8,
            ..LossWeights::default()
        };
        Supervisor::new(fs, 1, params, weights).unwrap()
    }

    #[test]
    fn fit_is_bit_identical_for_the_same_seed() {
        let fs = tiny_frameset(3);
        let sup = tiny_supervisor(&fs);
        let cfg = tiny_fit_cfg(24);
        let a = fit(&sup, &tiny_spec(), &cfg).unwrap();
        let b = fit(&sup, &tiny_spec(), &cfg).unwrap();
        assert!(a
            .sdf
            .data
            .iter()
            .map(|v| v.to_bits())
            .eq(b.sdf.data.iter().map(|v| v.to_bits())));
        assert!(a
            .flow
            .data
            .iter()
            .map(|v| v.to_bits())
            .eq(b.flow.data.iter().map(|v| v.to_bits())));
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn stage_one_fit_never_touches_flow_or_reads_cues() {
        let fs = tiny_frameset(3);
        let mut cfg = tiny_fit_cfg(16);
        cfg.stage1_fraction = 1.0;
        let r1 = fit(&tiny_supervisor(&fs), &tiny_spec(), &cfg).unwrap();
        assert!(r1.flow.data.iter().all(|v| *v == 0.0));
        assert!(r1.history.iter().all(|s| {
            s.stage == 1
                && s.breakdown.flow_static == 0.0
                && s.breakdown.flow_dynamic == 0.0
                && s.breakdown.dreg == 0.0
        }));
        // Scrambling every cue map must not change a geometry-only fit.
        let mut fs2 = tiny_frameset(3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for frame in &mut fs2.frames {
            frame.cue_forward = vec![Some(random_flow_map(&mut rng, 0.1, 3.0))];
            for bw in &mut frame.cue_backward {
                for cue in bw.values_mut() {
                    *cue = random_flow_map(&mut rng, 0.1, 3.0);
                }
            }
        }
        let r2 = fit(&tiny_supervisor(&fs2), &tiny_spec(), &cfg).unwrap();
        assert!(r1
            .sdf
            .data
            .iter()
            .map(|v| v.to_bits())
            .eq(r2.sdf.data.iter().map(|v| v.to_bits())));
    }

    #[test]
    fn single_stage_fit_steps_flow_from_the_start() {
        let fs = tiny_frameset(3);
        let mut cfg = tiny_fit_cfg(12);
        cfg.two_stage = false;
        let r = fit(&tiny_supervisor(&fs), &tiny_spec(), &cfg).unwrap();
        assert_eq!(r.history[0].stage, 2);
        assert!(r.flow.data.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn fit_requires_forward_cues_for_the_flow_stage() {
        let mut fs = tiny_frameset(3);
        fs.frames[1].cue_forward = vec![None];
        let sup = tiny_supervisor(&fs);
        match fit(&sup, &tiny_spec(), &tiny_fit_cfg(8)) {
            Err(Error::MissingFlowCues) => {}
            Err(e) => panic!("expected MissingFlowCues, got {e:?}"),
            Ok(_) => panic!("expected MissingFlowCues, fit succeeded"),
        }
        // A geometry-only run has no use for cues and must proceed.
        let mut cfg = tiny_fit_cfg(8);
        cfg.stage1_fraction = 1.0;
        assert!(fit(&sup, &tiny_spec(), &cfg).is_ok());
    }

    #[test]
    fn fit_config_validation_rejects_bad_settings() {
        let ok = FitConfig::default();
        assert!(ok.validate().is_ok());
        for breaker in [
            |c: &mut FitConfig| c.total_iters = 0,
            |c: &mut FitConfig| c.stage1_fraction = 1.5,
            |c: &mut FitConfig| c.n_tiles = 0,
            |c: &mut FitConfig| c.lr = 0.0,
            |c: &mut FitConfig| c.beta1 = 1.0,
            |c: &mut FitConfig| c.weight_decay = -0.1,
        ] {
            let mut cfg = FitConfig::default();
            breaker(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }
}
