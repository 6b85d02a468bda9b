//! Occlusion-aware volume rendering over an SDF grid.
//!
//! Rays are clipped to the grid box, sampled at stratified parameters, and
//! composited with alphas built from the ratio of adjacent CDF values of the
//! logistic `phi(x) = sigmoid(xi * x)` evaluated on the sampled SDF. This
//! makes weights peak at zero crossings along the viewing direction and
//! vanish behind the first surface.
//!
//! Everything here is paired with a hand-written adjoint; the backward
//! functions consume the exact intermediates the forward pass produced.

use nalgebra::Vector3;
use rand::Rng;

use crate::geometry::{aabb_clip, Ray};
use crate::grid::{ScalarField, TrilinearStencil, VectorField};

/// Rendering knobs shared by fitting and evaluation.
#[derive(Debug, Clone, Copy)]
pub struct RenderParams {
    /// Logistic sharpness; larger concentrates weight at the surface.
    pub xi: f64,
    /// Samples per ray.
    pub n_samples: usize,
    /// Rays whose weight sum falls below this are treated as misses.
    pub weight_threshold: f64,
    /// Per-sample weights below this skip expensive per-sample loss terms.
    pub sample_skip: f64,
}

impl RenderParams {
    pub fn new(xi: f64, n_samples: usize) -> Self {
        RenderParams {
            xi,
            n_samples,
            weight_threshold: 0.05,
            sample_skip: 1e-5,
        }
    }
}

#[inline]
fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// log phi(x) = -softplus(-xi x), stable at both tails.
#[inline]
fn log_phi(x: f64, xi: f64) -> f64 {
    let y = -xi * x;
    -(y.max(0.0) + (-y.abs()).exp().ln_1p())
}

/// Stratified sample parameters over `[t0, t1]`: bin midpoints, each
/// perturbed within its own bin when `jitter` is provided. Output is sorted
/// by construction.
pub fn stratified_ts<R: Rng>(t0: f64, t1: f64, n: usize, jitter: Option<&mut R>) -> Vec<f64> {
    debug_assert!(n > 0 && t1 > t0);
    let dt = (t1 - t0) / n as f64;
    match jitter {
        None => (0..n).map(|i| t0 + (i as f64 + 0.5) * dt).collect(),
        Some(rng) => (0..n)
            .map(|i| t0 + (i as f64 + rng.gen_range(0.0..1.0)) * dt)
            .collect(),
    }
}

/// Alphas from sampled SDF values: `alpha_i = max(1 - phi(s_{i+1})/phi(s_i), 0)`.
/// The last entry has no successor and is zero. Computed through log space so
/// deeply negative SDF runs do not underflow the ratio.
pub fn neus_alphas(sdf: &[f64], xi: f64) -> Vec<f64> {
    let n = sdf.len();
    let mut alphas = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let r = (log_phi(sdf[i + 1], xi) - log_phi(sdf[i], xi)).exp();
        alphas[i] = (1.0 - r).max(0.0);
    }
    alphas
}

/// Alphas plus their partials with respect to the two SDF samples forming
/// each one: `d_lo[i] = d alpha_i / d s_i`, `d_hi[i] = d alpha_i / d s_{i+1}`.
/// Clamped (occluded-ratio) entries have zero partials.
pub fn neus_alphas_grad(sdf: &[f64], xi: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = sdf.len();
    let (mut alphas, mut d_lo, mut d_hi) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n.saturating_sub(1) {
        let r = (log_phi(sdf[i + 1], xi) - log_phi(sdf[i], xi)).exp();
        if r < 1.0 {
            alphas[i] = 1.0 - r;
            // d log phi / ds = xi * (1 - phi(s)) = xi * sigmoid(-xi s)
            d_lo[i] = r * xi * sigmoid(-xi * sdf[i]);
            d_hi[i] = -r * xi * sigmoid(-xi * sdf[i + 1]);
        }
    }
    (alphas, d_lo, d_hi)
}

/// Front-to-back compositing: returns per-sample weights and the leftover
/// transmittance. `sum(weights) + leftover == 1` exactly up to rounding.
pub fn composite_weights(alphas: &[f64]) -> (Vec<f64>, f64) {
    let mut weights = Vec::with_capacity(alphas.len());
    let mut trans = 1.0;
    for &a in alphas {
        weights.push(a * trans);
        trans *= 1.0 - a;
    }
    (weights, trans)
}

/// Expectation of per-sample values under the compositing weights.
#[inline]
pub fn render_expectation(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(w, v)| w * v).sum()
}

/// Adjoint of `composite_weights`: given `dL/dw_i`, returns `dL/dalpha_k`
/// without dividing by `(1 - alpha)`, so saturated alphas are safe:
/// `dL/dalpha_k = T_k (A_k - C_k)` with the reverse recurrence
/// `C_k = A_{k+1} alpha_{k+1} + (1 - alpha_{k+1}) C_{k+1}`.
pub fn weights_backward(alphas: &[f64], dl_dw: &[f64]) -> Vec<f64> {
    let n = alphas.len();
    debug_assert_eq!(dl_dw.len(), n);
    let mut trans = Vec::with_capacity(n);
    let mut t = 1.0;
    for &a in alphas {
        trans.push(t);
        t *= 1.0 - a;
    }
    let mut out = vec![0.0; n];
    let mut c = 0.0;
    for k in (0..n).rev() {
        out[k] = trans[k] * (dl_dw[k] - c);
        c = dl_dw[k] * alphas[k] + (1.0 - alphas[k]) * c;
    }
    out
}

/// Chain `dL/dalpha` through the alpha construction into per-sample SDF
/// adjoints, using the partials from [`neus_alphas_grad`].
pub fn alphas_backward(dl_da: &[f64], d_lo: &[f64], d_hi: &[f64]) -> Vec<f64> {
    let n = dl_da.len();
    let mut dl_ds = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        dl_ds[i] += dl_da[i] * d_lo[i];
        dl_ds[i + 1] += dl_da[i] * d_hi[i];
    }
    dl_ds
}

/// Everything sampled along one ray, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RaySample {
    pub ray: Ray,
    pub ts: Vec<f64>,
    pub points: Vec<Vector3<f64>>,
    /// Trilinear footprints of `points`; SDF and flow grids share the lattice
    /// so one set serves both.
    pub stencils: Vec<TrilinearStencil>,
    pub sdf: Vec<f64>,
    pub alphas: Vec<f64>,
    /// d alpha_i / d s_i and d alpha_i / d s_{i+1}.
    pub alpha_d_lo: Vec<f64>,
    pub alpha_d_hi: Vec<f64>,
    pub weights: Vec<f64>,
    pub leftover: f64,
}

impl RaySample {
    /// Re-evaluates SDF-dependent state against a (possibly perturbed) field,
    /// keeping the sample positions and stencils fixed. Lets finite-difference
    /// checks rebuild the forward pass on an identical ray structure.
    pub fn refresh(&mut self, sdf: &ScalarField, xi: f64) {
        for (s, st) in self.sdf.iter_mut().zip(&self.stencils) {
            *s = sdf.sample_stencil(st);
        }
        let (alphas, d_lo, d_hi) = neus_alphas_grad(&self.sdf, xi);
        let (weights, leftover) = composite_weights(&alphas);
        self.alphas = alphas;
        self.alpha_d_lo = d_lo;
        self.alpha_d_hi = d_hi;
        self.weights = weights;
        self.leftover = leftover;
    }

    #[inline]
    pub fn weight_sum(&self) -> f64 {
        1.0 - self.leftover
    }

    /// Expected ray distance (length along the ray, not camera depth).
    #[inline]
    pub fn expected_t(&self) -> f64 {
        render_expectation(&self.weights, &self.ts)
    }

    /// Expected 2-channel flow at the surface.
    pub fn expected_flow(&self, flow: &VectorField) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (w, st) in self.weights.iter().zip(&self.stencils) {
            let f = flow.sample_stencil(st);
            out[0] += w * f[0];
            out[1] += w * f[1];
        }
        out
    }

    /// Scatter a per-sample SDF adjoint into a dense gradient buffer laid out
    /// like the SDF grid.
    pub fn scatter_sdf_adjoint(&self, dl_ds: &[f64], grad: &mut [f64]) {
        for (g, st) in dl_ds.iter().zip(&self.stencils) {
            if *g == 0.0 {
                continue;
            }
            for c in 0..8 {
                grad[st.idx[c]] += g * st.w[c];
            }
        }
    }

    /// Scatter a per-sample flow adjoint (2 channels) into a dense gradient
    /// buffer laid out like the flow grid.
    pub fn scatter_flow_adjoint(&self, dl_df: &[[f64; 2]], grad: &mut [f64]) {
        for (g, st) in dl_df.iter().zip(&self.stencils) {
            if g[0] == 0.0 && g[1] == 0.0 {
                continue;
            }
            for c in 0..8 {
                let at = st.idx[c] * 2;
                grad[at] += g[0] * st.w[c];
                grad[at + 1] += g[1] * st.w[c];
            }
        }
    }
}

/// Samples and composites one ray against the SDF grid. Returns `None` when
/// the forward ray misses the grid box entirely. `jitter` perturbs samples
/// within their stratification bins; pass `None` for deterministic midpoints.
pub fn render_ray<R: Rng>(
    sdf: &ScalarField,
    ray: &Ray,
    params: &RenderParams,
    jitter: Option<&mut R>,
) -> Option<RaySample> {
    let (lo, hi) = sdf.spec.aabb();
    let (t0, t1) = aabb_clip(ray, &lo, &hi)?;
    let t0 = t0.max(0.0);
    if !(t1 > t0) {
        return None;
    }
    let ts = stratified_ts(t0, t1, params.n_samples, jitter);
    let points: Vec<Vector3<f64>> = ts.iter().map(|&t| ray.at(t)).collect();
    let stencils: Vec<TrilinearStencil> =
        points.iter().map(|p| sdf.spec.trilinear_stencil(p)).collect();
    let s: Vec<f64> = stencils.iter().map(|st| sdf.sample_stencil(st)).collect();
    let (alphas, d_lo, d_hi) = neus_alphas_grad(&s, params.xi);
    let (weights, leftover) = composite_weights(&alphas);
    Some(RaySample {
        ray: ray.clone(),
        ts,
        points,
        stencils,
        sdf: s,
        alphas,
        alpha_d_lo: d_lo,
        alpha_d_hi: d_hi,
        weights,
        leftover,
    })
}

/// One pixel of a rendered tile.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelRender {
    /// Camera-frame depth (ray distance scaled by the direction's z factor).
    pub depth: f64,
    /// Expected 2-channel flow, zero when no flow grid is given.
    pub flow: [f64; 2],
    pub weight_sum: f64,
}

/// Full per-pixel render of a rectangular pixel window, deterministic
/// (midpoint samples). Misses get the zero sentinel. Row-major over the
/// window; `rays` keeps the per-pixel samples for backward passes and is
/// `None` on a miss.
pub struct TileRender {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<PixelRender>,
    pub rays: Vec<Option<RaySample>>,
    /// cos factor per pixel converting ray length to camera depth.
    pub cos_z: Vec<f64>,
}

pub fn render_tile(
    sdf: &ScalarField,
    flow: Option<&VectorField>,
    cam: &crate::geometry::Camera,
    x0: usize,
    y0: usize,
    width: usize,
    height: usize,
    params: &RenderParams,
) -> TileRender {
    let mut pixels = Vec::with_capacity(width * height);
    let mut rays = Vec::with_capacity(width * height);
    let mut cos_z = Vec::with_capacity(width * height);
    for y in y0..y0 + height {
        for x in x0..x0 + width {
            let (ray, cz) = cam.ray(&nalgebra::Vector2::new(x as f64, y as f64));
            cos_z.push(cz);
            match render_ray::<rand_chacha::ChaCha8Rng>(sdf, &ray, params, None) {
                Some(rs) => {
                    let depth = rs.expected_t() * cz;
                    let fl = match flow {
                        Some(f) => rs.expected_flow(f),
                        None => [0.0; 2],
                    };
                    pixels.push(PixelRender {
                        depth,
                        flow: fl,
                        weight_sum: rs.weight_sum(),
                    });
                    rays.push(Some(rs));
                }
                None => {
                    pixels.push(PixelRender::default());
                    rays.push(None);
                }
            }
        }
    }
    TileRender {
        x0,
        y0,
        width,
        height,
        pixels,
        rays,
        cos_z,
    }
}
