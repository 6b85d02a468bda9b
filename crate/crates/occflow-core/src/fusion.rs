//! Forward-only feature-fusion kernels: ego-motion alignment of voxel
//! features, BEV slicing with a mean-pooled global slice, deformable
//! attention, the backward-forward temporal attention sweep, gated
//! BEV-to-volume fusion, and the tri-plane lift.
//!
//! These are reference implementations with supplied (or randomized)
//! parameters; nothing here is trained and nothing needs gradients. Feature
//! warps zero-fill outside the volume (absent history reads as zero), unlike
//! the clamp-to-boundary sampling used for geometry fields.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::geometry::RigidTransform;
use crate::grid::{FeatureVolume, GridSpec};
use crate::Result;

/// Grid coordinates this close to a lattice point are snapped onto it, so
/// warps that are exact index maps (identity, whole-voxel shifts, quarter
/// turns) reproduce voxel values bit for bit instead of blending neighbors
/// with roundoff-sized weights.
const LATTICE_SNAP: f64 = 1e-9;

/// Dense rows x cols feature map with interleaved channels. Used both for
/// horizontal BEV slices (rows = x bins, cols = y bins) and for the three
/// lift planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePlane {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeaturePlane {
    pub fn new_zero(rows: usize, cols: usize, channels: usize) -> Self {
        FeaturePlane {
            rows,
            cols,
            channels,
            data: vec![0.0; rows * cols * channels],
        }
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut plane = FeaturePlane::new_zero(rows, cols, channels);
        for r in 0..rows {
            for c in 0..cols {
                for ch in 0..channels {
                    plane.data[(r * cols + c) * channels + ch] = f(r, c, ch);
                }
            }
        }
        plane
    }

    pub fn same_shape(&self, other: &FeaturePlane) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.channels == other.channels
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> &[f64] {
        let at = (r * self.cols + c) * self.channels;
        &self.data[at..at + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let at = (r * self.cols + c) * self.channels;
        &mut self.data[at..at + self.channels]
    }

    /// Bilinear sample at fractional indices; corners outside the plane
    /// contribute zero. Integer coordinates read the stored value exactly.
    pub fn sample_bilinear_zero(&self, r: f64, c: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        let (rf, cf) = (r.floor(), c.floor());
        let (fr, fc) = (r - rf, c - cf);
        let (r0, c0) = (rf as i64, cf as i64);
        for dr in 0..2i64 {
            for dc in 0..2i64 {
                let (i, j) = (r0 + dr, c0 + dc);
                if i < 0 || j < 0 || i >= self.rows as i64 || j >= self.cols as i64 {
                    continue;
                }
                let w = if dr == 0 { 1.0 - fr } else { fr }
                    * if dc == 0 { 1.0 - fc } else { fc };
                let at = (i as usize * self.cols + j as usize) * self.channels;
                for ch in 0..self.channels {
                    out[ch] += w * self.data[at + ch];
                }
            }
        }
    }
}

/// A feature volume flattened along z: the `dims[2]` horizontal slices in
/// order, then one mean-pooled global slice. The global slice takes part in
/// attention like any other (it rides at index `dims[2]`).
#[derive(Debug, Clone, PartialEq)]
pub struct BevSlices {
    /// Geometry of the volume the slices came from (and fold back into).
    pub spec: GridSpec,
    /// `dims[2] + 1` planes of shape `dims[0] x dims[1]`; global slice last.
    pub slices: Vec<FeaturePlane>,
}

impl BevSlices {
    pub fn validate(&self) -> Result<()> {
        let [h, w, z] = self.spec.dims;
        if self.slices.len() != z + 1 {
            return Err(Error::DimensionMismatch(format!(
                "BEV stack has {} slices, expected {} (z bins + global)",
                self.slices.len(),
                z + 1
            )));
        }
        let channels = self.slices[0].channels;
        for (at, s) in self.slices.iter().enumerate() {
            if s.rows != h || s.cols != w || s.channels != channels {
                return Err(Error::DimensionMismatch(format!(
                    "BEV slice {at} is {}x{}x{}, expected {h}x{w}x{channels}",
                    s.rows, s.cols, s.channels
                )));
            }
        }
        Ok(())
    }

    /// The z-indexed slices, without the global one.
    pub fn horizontal(&self) -> &[FeaturePlane] {
        &self.slices[..self.slices.len() - 1]
    }

    pub fn global(&self) -> &FeaturePlane {
        &self.slices[self.slices.len() - 1]
    }
}

/// Sampling pattern for [`deformable_attention`]: for each of `maps` value
/// maps, `heads * points` offsets (fractional row/col units, relative to the
/// query pixel) with matching attention weights. Weights are normalized at
/// construction to sum to one over the whole maps x heads x points set, so a
/// zero-offset pattern averages rather than amplifies. `beta` is the residual
/// scale applied by [`bfam`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeformAttnParams {
    pub maps: usize,
    pub heads: usize,
    pub points: usize,
    pub offsets: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub beta: f64,
}

impl DeformAttnParams {
    pub fn new(
        maps: usize,
        heads: usize,
        points: usize,
        offsets: Vec<[f64; 2]>,
        weights: Vec<f64>,
        beta: f64,
    ) -> Result<Self> {
        let n = maps * heads * points;
        if maps == 0 || heads == 0 || points == 0 {
            return Err(Error::Config(
                "deformable attention needs at least one map, head, and point".into(),
            ));
        }
        if offsets.len() != n || weights.len() != n {
            return Err(Error::Config(format!(
                "expected {n} offsets and weights (maps*heads*points), got {} and {}",
                offsets.len(),
                weights.len()
            )));
        }
        if offsets.iter().any(|o| !o[0].is_finite() || !o[1].is_finite()) {
            return Err(Error::Config("non-finite sampling offset".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "attention weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("attention weights sum to zero".into()));
        }
        if !beta.is_finite() {
            return Err(Error::Config("non-finite attention scale".into()));
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(DeformAttnParams {
            maps,
            heads,
            points,
            offsets,
            weights,
            beta,
        })
    }

    /// Random pattern: offsets within +-2.5 cells, positive weights.
    pub fn random(
        maps: usize,
        heads: usize,
        points: usize,
        beta: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let n = maps * heads * points;
        let offsets = (0..n)
            .map(|_| [rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)])
            .collect();
        let weights = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        DeformAttnParams::new(maps, heads, points, offsets, weights, beta)
            .expect("randomized parameters are always valid")
    }

    #[inline]
    fn idx(&self, m: usize, h: usize, p: usize) -> usize {
        (m * self.heads + h) * self.points + p
    }
}

/// Per-channel gate for [`bev_volume_fuse`]: a 1x1 channel-mixing map,
/// `logit_c = sum_c' weight[c * C + c'] * v_c' + bias[c]`, squashed by a
/// logistic.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GateParams {
    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        GateParams {
            weight: (0..channels * channels)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            bias: (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }
}

/// Warp a feature volume into the frame whose voxel centers it should be read
/// at: output voxel (i, j, k) holds `v` trilinearly sampled at
/// `t_rel * center(i, j, k)`, where `t_rel` maps the output grid's points
/// into `v`'s ego frame. Samples outside `v` read zero (absent history).
pub fn ego_align(v: &FeatureVolume, t_rel: &RigidTransform) -> FeatureVolume {
    let spec = v.spec.clone();
    let mut out = FeatureVolume::new_zero(spec.clone(), v.channels);
    let mut buf = vec![0.0; v.channels];
    for i in 0..spec.dims[0] {
        for j in 0..spec.dims[1] {
            for k in 0..spec.dims[2] {
                let p = t_rel.transform_point(&spec.voxel_center(i, j, k));
                let mut u = spec.world_to_grid(&p);
                for a in 0..3 {
                    let snapped = u[a].round();
                    if (u[a] - snapped).abs() < LATTICE_SNAP {
                        u[a] = snapped;
                    }
                }
                gather_zero(v, &u, &mut buf);
                out.at_mut(i, j, k).copy_from_slice(&buf);
            }
        }
    }
    out
}

/// Zero-fill trilinear gather at fractional grid coordinates `u`.
fn gather_zero(v: &FeatureVolume, u: &Vector3<f64>, out: &mut [f64]) {
    out.fill(0.0);
    let base = [
        u[0].floor() as i64,
        u[1].floor() as i64,
        u[2].floor() as i64,
    ];
    let frac = [
        u[0] - base[0] as f64,
        u[1] - base[1] as f64,
        u[2] - base[2] as f64,
    ];
    for di in 0..2i64 {
        for dj in 0..2i64 {
            for dk in 0..2i64 {
                let (ci, cj, ck) = (base[0] + di, base[1] + dj, base[2] + dk);
                if ci < 0
                    || cj < 0
                    || ck < 0
                    || ci >= v.spec.dims[0] as i64
                    || cj >= v.spec.dims[1] as i64
                    || ck >= v.spec.dims[2] as i64
                {
                    continue;
                }
                let w = if di == 0 { 1.0 - frac[0] } else { frac[0] }
                    * if dj == 0 { 1.0 - frac[1] } else { frac[1] }
                    * if dk == 0 { 1.0 - frac[2] } else { frac[2] };
                let at = v.spec.index(ci as usize, cj as usize, ck as usize) * v.channels;
                for ch in 0..v.channels {
                    out[ch] += w * v.data[at + ch];
                }
            }
        }
    }
}

/// Flatten a volume along z: one plane per z bin plus the mean-pooled global
/// slice.
pub fn volume_to_bev(v: &FeatureVolume) -> BevSlices {
    let [h, w, z] = v.spec.dims;
    let channels = v.channels;
    let mut slices = Vec::with_capacity(z + 1);
    for k in 0..z {
        slices.push(FeaturePlane::from_fn(h, w, channels, |i, j, ch| {
            v.at(i, j, k)[ch]
        }));
    }
    let mut global = FeaturePlane::new_zero(h, w, channels);
    for k in 0..z {
        for (g, s) in global.data.iter_mut().zip(&slices[k].data) {
            *g += s;
        }
    }
    for g in global.data.iter_mut() {
        *g /= z as f64;
    }
    slices.push(global);
    BevSlices { spec: v.spec.clone(), slices }
}

/// Fold a BEV stack back into its volume; the global slice comes back
/// separately. Inverse of [`volume_to_bev`] on the z-indexed slices.
pub fn slices_to_volume(bev: &BevSlices) -> Result<(FeatureVolume, FeaturePlane)> {
    bev.validate()?;
    let channels = bev.slices[0].channels;
    let mut v = FeatureVolume::new_zero(bev.spec.clone(), channels);
    for k in 0..bev.spec.dims[2] {
        let slice = &bev.slices[k];
        for i in 0..bev.spec.dims[0] {
            for j in 0..bev.spec.dims[1] {
                v.at_mut(i, j, k).copy_from_slice(slice.at(i, j));
            }
        }
    }
    Ok((v, bev.global().clone()))
}

/// Weighted gather: for every query pixel, sample each value map bilinearly
/// at the pixel plus each head/point offset and sum with the normalized
/// attention weights. Out-of-bounds samples read zero. The query fixes the
/// reference grid and output shape; with supplied (not predicted) offsets and
/// weights its content does not enter the sum.
pub fn deformable_attention(
    query: &FeaturePlane,
    values: &[&FeaturePlane],
    params: &DeformAttnParams,
) -> Result<FeaturePlane> {
    if values.len() != params.maps {
        return Err(Error::Config(format!(
            "parameters cover {} value maps, got {}",
            params.maps,
            values.len()
        )));
    }
    for (at, v) in values.iter().enumerate() {
        if !v.same_shape(query) {
            return Err(Error::DimensionMismatch(format!(
                "value map {at} is {}x{}x{}, query is {}x{}x{}",
                v.rows, v.cols, v.channels, query.rows, query.cols, query.channels
            )));
        }
    }
    let mut out = FeaturePlane::new_zero(query.rows, query.cols, query.channels);
    let mut sample = vec![0.0; query.channels];
    for r in 0..query.rows {
        for c in 0..query.cols {
            for (m, vmap) in values.iter().enumerate() {
                for h in 0..params.heads {
                    for p in 0..params.points {
                        let at = params.idx(m, h, p);
                        let [dr, dc] = params.offsets[at];
                        let weight = params.weights[at];
                        vmap.sample_bilinear_zero(r as f64 + dr, c as f64 + dc, &mut sample);
                        let o = out.at_mut(r, c);
                        for ch in 0..sample.len() {
                            o[ch] += weight * sample[ch];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One residual attention update of `seq[tgt]` against `seq[src]`, slice by
/// slice (the global slice participates like any other). Value maps are
/// ordered (source, target), so `params.maps` must be 2.
fn bfam_step(seq: &mut [BevSlices], tgt: usize, src: usize, params: &DeformAttnParams) -> Result<()> {
    let updates = (0..seq[tgt].slices.len())
        .map(|z| {
            deformable_attention(
                &seq[tgt].slices[z],
                &[&seq[src].slices[z], &seq[tgt].slices[z]],
                params,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    for (z, d) in updates.into_iter().enumerate() {
        let slice = &mut seq[tgt].slices[z];
        for (x, dx) in slice.data.iter_mut().zip(&d.data) {
            *x += params.beta * dx;
        }
    }
    Ok(())
}

/// Backward-forward temporal attention over a BEV stack sequence, oldest
/// first (`seq[n-1]` is the current frame). The backward sweep pushes current
/// information into history one step at a time, the forward sweep carries the
/// enriched history back up to the current frame; each update is residual
/// with scale `params.beta`, attending to the neighbor and to itself. With a
/// single frame or `beta = 0` the sequence passes through untouched.
pub fn bfam(seq: &[BevSlices], params: &DeformAttnParams) -> Result<Vec<BevSlices>> {
    if seq.is_empty() {
        return Err(Error::Config("temporal sequence is empty".into()));
    }
    if params.maps != 2 {
        return Err(Error::Config(format!(
            "temporal attention needs parameters for 2 value maps, got {}",
            params.maps
        )));
    }
    for stack in seq {
        stack.validate()?;
        if stack.spec != seq[0].spec || stack.slices[0].channels != seq[0].slices[0].channels {
            return Err(Error::DimensionMismatch(
                "temporal BEV stacks disagree in shape".into(),
            ));
        }
    }
    let n = seq.len();
    let mut out = seq.to_vec();
    for i in 0..n - 1 {
        bfam_step(&mut out, n - 2 - i, n - 1 - i, params)?;
    }
    for i in (0..n - 1).rev() {
        bfam_step(&mut out, n - 1 - i, n - 2 - i, params)?;
    }
    Ok(out)
}

/// Add the global BEV slice into every z layer of the volume, modulated by a
/// per-voxel logistic gate computed from the volume's own channels:
/// `out = v + sigmoid(gate(v)) * b_g` with `b_g` broadcast along z.
pub fn bev_volume_fuse(
    v: &FeatureVolume,
    b_g: &FeaturePlane,
    gate: &GateParams,
) -> Result<FeatureVolume> {
    let [h, w, z] = v.spec.dims;
    let channels = v.channels;
    if b_g.rows != h || b_g.cols != w || b_g.channels != channels {
        return Err(Error::DimensionMismatch(format!(
            "global slice is {}x{}x{}, volume wants {h}x{w}x{channels}",
            b_g.rows, b_g.cols, b_g.channels
        )));
    }
    if gate.weight.len() != channels * channels || gate.bias.len() != channels {
        return Err(Error::Config(format!(
            "gate shaped for {} channels, volume has {channels}",
            gate.bias.len()
        )));
    }
    let mut out = v.clone();
    for i in 0..h {
        for j in 0..w {
            let global = b_g.at(i, j);
            for k in 0..z {
                let feat = v.at(i, j, k);
                let fused = out.at_mut(i, j, k);
                for c in 0..channels {
                    let mut logit = gate.bias[c];
                    for (cc, x) in feat.iter().enumerate() {
                        logit += gate.weight[c * channels + cc] * x;
                    }
                    fused[c] += logistic(logit) * global[c];
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Broadcast three orthogonal feature planes into a volume and sum them:
/// `V[i, j, k] = t_hw[i, j] + t_zh[k, i] + t_wz[j, k]` with
/// `spec.dims = [H, W, Z]`.
pub fn tpv_lift(
    t_hw: &FeaturePlane,
    t_zh: &FeaturePlane,
    t_wz: &FeaturePlane,
    spec: &GridSpec,
) -> Result<FeatureVolume> {
    let [h, w, z] = spec.dims;
    let channels = t_hw.channels;
    let want = [(t_hw, h, w, "HW"), (t_zh, z, h, "ZH"), (t_wz, w, z, "WZ")];
    for (plane, rows, cols, name) in want {
        if plane.rows != rows || plane.cols != cols || plane.channels != channels {
            return Err(Error::DimensionMismatch(format!(
                "{name} plane is {}x{}x{}, expected {rows}x{cols}x{channels}",
                plane.rows, plane.cols, plane.channels
            )));
        }
    }
    let mut v = FeatureVolume::new_zero(spec.clone(), channels);
    for i in 0..h {
        for j in 0..w {
            for k in 0..z {
                let out = v.at_mut(i, j, k);
                let (a, b, c) = (t_hw.at(i, j), t_zh.at(k, i), t_wz.at(j, k));
                for ch in 0..channels {
                    out[ch] = a[ch] + b[ch] + c[ch];
                }
            }
        }
    }
    Ok(v)
}

/// One oracle comparison from [`selftest`].
#[derive(Debug, Clone)]
pub struct KernelCheck {
    pub kernel: &'static str,
    pub check: &'static str,
    pub pass: bool,
}

/// Deterministic oracle suite over every kernel; drives `kernels selftest`.
/// Each entry pits a kernel against an independently coded expectation
/// (index arithmetic, full-scan gathers, hand-unrolled schedules).
pub fn selftest() -> Vec<KernelCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checks = Vec::new();
    let mut push = |kernel, check, pass| checks.push(KernelCheck { kernel, check, pass });

    // xy-symmetric spec so a quarter turn about z is an index permutation.
    let spec = GridSpec::new([6, 6, 4], [-0.6, -0.6, 0.0], [0.2, 0.2, 0.2]).unwrap();
    let v = random_volume(&spec, 3, &mut rng);

    let aligned = ego_align(&v, &RigidTransform::identity());
    push("ego_align", "identity is exact", aligned.data == v.data);

    let shift = RigidTransform::from_translation(Vector3::new(0.2, 0.0, 0.0));
    let shifted = ego_align(&v, &shift);
    let mut shift_ok = true;
    for i in 0..6 {
        for j in 0..6 {
            for k in 0..4 {
                let want: &[f64] = if i + 1 < 6 { v.at(i + 1, j, k) } else { &[0.0; 3] };
                shift_ok &= shifted.at(i, j, k) == want;
            }
        }
    }
    push("ego_align", "one-voxel shift is an index shift", shift_ok);

    let quarter = ego_align(&v, &RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::zeros()));
    let mut turn_ok = true;
    for i in 0..6 {
        for j in 0..6 {
            for k in 0..4 {
                turn_ok &= quarter.at(i, j, k) == v.at(5 - j, i, k);
            }
        }
    }
    push("ego_align", "quarter turn permutes axes", turn_ok);

    let bev = volume_to_bev(&v);
    let mut mean_ok = bev.validate().is_ok();
    for i in 0..6 {
        for j in 0..6 {
            for ch in 0..3 {
                let brute: f64 = (0..4).map(|k| v.at(i, j, k)[ch]).sum::<f64>() / 4.0;
                mean_ok &= (bev.global().at(i, j)[ch] - brute).abs() < 1e-12;
            }
        }
    }
    push("volume_to_bev", "global slice is the column mean", mean_ok);

    let (rebuilt, global) = slices_to_volume(&bev).unwrap();
    push(
        "volume_to_bev",
        "slices fold back into the volume",
        rebuilt.data == v.data && global == *bev.global(),
    );

    let value = random_plane(7, 5, 2, &mut rng);
    let probe = DeformAttnParams::new(1, 1, 1, vec![[2.0, -1.0]], vec![3.0], 1.0).unwrap();
    let read = deformable_attention(&value, &[&value], &probe).unwrap();
    let mut probe_ok = true;
    for r in 0..7i64 {
        for c in 0..5i64 {
            let (i, j) = (r + 2, c - 1);
            let want: &[f64] = if i >= 0 && i < 7 && j >= 0 && j < 5 {
                value.at(i as usize, j as usize)
            } else {
                &[0.0; 2]
            };
            probe_ok &= read.at(r as usize, c as usize) == want;
        }
    }
    push(
        "deformable_attention",
        "unit-weight integer offset reads the value exactly",
        probe_ok,
    );

    let other = random_plane(7, 5, 2, &mut rng);
    let params = DeformAttnParams::random(2, 2, 3, 1.0, &mut rng);
    let attn = deformable_attention(&value, &[&value, &other], &params).unwrap();
    let mut scan_ok = true;
    for r in 0..7 {
        for c in 0..5 {
            for ch in 0..2 {
                let mut brute = 0.0;
                for (m, vmap) in [&value, &other].iter().enumerate() {
                    for h in 0..2 {
                        for p in 0..3 {
                            let at = (m * 2 + h) * 3 + p;
                            let [dr, dc] = params.offsets[at];
                            brute += params.weights[at]
                                * hat_scan(vmap, r as f64 + dr, c as f64 + dc, ch);
                        }
                    }
                }
                scan_ok &= (attn.at(r, c)[ch] - brute).abs() < 1e-9;
            }
        }
    }
    push(
        "deformable_attention",
        "matches the full-scan gather oracle",
        scan_ok,
    );

    let seq: Vec<BevSlices> = (0..3)
        .map(|_| volume_to_bev(&random_volume(&spec, 2, &mut rng)))
        .collect();
    let frozen = DeformAttnParams::random(2, 2, 2, 0.0, &mut rng);
    let same = bfam(&seq, &frozen).unwrap();
    push("bfam", "zero scale is the identity", same == seq);
    push(
        "bfam",
        "single frame is the identity",
        bfam(&seq[..1], &frozen).unwrap() == seq[..1],
    );

    let live = DeformAttnParams::random(2, 2, 2, 0.7, &mut rng);
    let fused = bfam(&seq, &live).unwrap();
    let mut trace = seq.clone();
    // Hand-unrolled n = 3 schedule: backward toward history, forward back.
    for (tgt, src) in [(1usize, 2usize), (0, 1), (1, 0), (2, 1)] {
        for z in 0..trace[tgt].slices.len() {
            let d = deformable_attention(
                &trace[tgt].slices[z],
                &[&trace[src].slices[z], &trace[tgt].slices[z]],
                &live,
            )
            .unwrap();
            for (x, dx) in trace[tgt].slices[z].data.iter_mut().zip(&d.data) {
                *x += live.beta * dx;
            }
        }
    }
    push("bfam", "n = 3 matches the hand-unrolled schedule", fused == trace);

    let closed = GateParams { weight: vec![0.0; 9], bias: vec![-800.0; 3] };
    let open = GateParams { weight: vec![0.0; 9], bias: vec![800.0; 3] };
    let ones = FeaturePlane::from_fn(6, 6, 3, |_, _, _| 1.0);
    let shut = bev_volume_fuse(&v, &ones, &closed).unwrap();
    push("bev_volume_fuse", "closed gate returns the volume", shut.data == v.data);
    let lifted = bev_volume_fuse(&v, &ones, &open).unwrap();
    let open_ok = lifted
        .data
        .iter()
        .zip(&v.data)
        .all(|(a, b)| *a == b + 1.0);
    push("bev_volume_fuse", "open gate adds the global slice", open_ok);

    let b_g = random_plane(6, 6, 3, &mut rng);
    let gate = GateParams::random(3, &mut rng);
    let fusev = bev_volume_fuse(&v, &b_g, &gate).unwrap();
    let mut fuse_ok = true;
    for i in 0..6 {
        for j in 0..6 {
            for k in 0..4 {
                for c in 0..3 {
                    let feat = v.at(i, j, k);
                    let logit: f64 = gate.bias[c]
                        + (0..3).map(|cc| gate.weight[c * 3 + cc] * feat[cc]).sum::<f64>();
                    let want = feat[c] + 1.0 / (1.0 + (-logit).exp()) * b_g.at(i, j)[c];
                    fuse_ok &= (fusev.at(i, j, k)[c] - want).abs() < 1e-12;
                }
            }
        }
    }
    push("bev_volume_fuse", "matches direct broadcast arithmetic", fuse_ok);

    let lift_spec = GridSpec::new([4, 3, 5], [0.0, 0.0, 0.0], [0.5, 0.5, 0.5]).unwrap();
    let t_hw = random_plane(4, 3, 2, &mut rng);
    let t_zh = random_plane(5, 4, 2, &mut rng);
    let t_wz = random_plane(3, 5, 2, &mut rng);
    let lift = tpv_lift(&t_hw, &t_zh, &t_wz, &lift_spec).unwrap();
    let mut lift_ok = true;
    for i in 0..4 {
        for j in 0..3 {
            for k in 0..5 {
                for ch in 0..2 {
                    let want =
                        t_hw.at(i, j)[ch] + t_zh.at(k, i)[ch] + t_wz.at(j, k)[ch];
                    lift_ok &= lift.at(i, j, k)[ch] == want;
                }
            }
        }
    }
    push("tpv_lift", "matches the triple-loop index oracle", lift_ok);

    checks
}

/// Bilinear read reformulated as a full scan with hat weights; the oracle
/// counterpart of [`FeaturePlane::sample_bilinear_zero`].
fn hat_scan(plane: &FeaturePlane, r: f64, c: f64, ch: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..plane.rows {
        for j in 0..plane.cols {
            let w = (1.0 - (r - i as f64).abs()).max(0.0)
                * (1.0 - (c - j as f64).abs()).max(0.0);
            if w > 0.0 {
                acc += w * plane.at(i, j)[ch];
            }
        }
    }
    acc
}

fn random_volume(spec: &GridSpec, channels: usize, rng: &mut impl Rng) -> FeatureVolume {
    let mut v = FeatureVolume::new_zero(spec.clone(), channels);
    for x in v.data.iter_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    v
}

fn random_plane(rows: usize, cols: usize, channels: usize, rng: &mut impl Rng) -> FeaturePlane {
    let mut p = FeaturePlane::new_zero(rows, cols, channels);
    for x in p.data.iter_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    p
}

#[cfg(test)]
mod tests {
    use proptest::{prop_assert, proptest};

    use super::*;

    fn spec_cube() -> GridSpec {
        GridSpec::new([6, 6, 4], [-0.6, -0.6, 0.0], [0.2, 0.2, 0.2]).unwrap()
    }

    #[test]
    fn every_selftest_oracle_passes() {
        let checks = selftest();
        let kernels: std::collections::BTreeSet<_> =
            checks.iter().map(|c| c.kernel).collect();
        assert!(kernels.len() >= 5, "selftest covers {kernels:?}");
        for c in &checks {
            assert!(c.pass, "{} / {}", c.kernel, c.check);
        }
    }

    #[test]
    fn identity_alignment_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_volume(&spec_cube(), 4, &mut rng);
        assert_eq!(ego_align(&v, &RigidTransform::identity()).data, v.data);
    }

    #[test]
    fn voxel_translation_shifts_indices_with_a_zero_border() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_volume(&spec_cube(), 2, &mut rng);
        let t = RigidTransform::from_translation(Vector3::new(0.2, 0.0, 0.0));
        let out = ego_align(&v, &t);
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..4 {
                    if i + 1 < 6 {
                        assert_eq!(out.at(i, j, k), v.at(i + 1, j, k));
                    } else {
                        assert_eq!(out.at(i, j, k), &[0.0, 0.0]);
                    }
                }
            }
        }
    }

    #[test]
    fn quarter_turn_permutes_the_horizontal_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_volume(&spec_cube(), 3, &mut rng);
        let t = RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::zeros());
        let out = ego_align(&v, &t);
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..4 {
                    assert_eq!(out.at(i, j, k), v.at(5 - j, i, k));
                }
            }
        }
    }

    #[test]
    fn chained_warps_stay_within_twice_the_single_warp_error() {
        // Smooth volume, sub-voxel motions, interior margin wide enough that
        // neither warp touches the zero-filled border.
        let spec = GridSpec::new([12, 12, 8], [-1.2, -1.2, -0.8], [0.2, 0.2, 0.2]).unwrap();
        let f = |p: Vector3<f64>| (2.0 * p.x + 0.3).sin() * (1.5 * p.y).cos() + 0.5 * p.z;
        let mut v = FeatureVolume::new_zero(spec.clone(), 1);
        for i in 0..12 {
            for j in 0..12 {
                for k in 0..8 {
                    v.at_mut(i, j, k)[0] = f(spec.voxel_center(i, j, k));
                }
            }
        }
        // Same-sign motions: the combined warp lands mid-cell, so the single
        // warp's error is a genuine one-interpolation-step baseline rather
        // than a lucky near-lattice hit.
        let t1 = RigidTransform::from_yaw(0.03, Vector3::new(0.05, 0.04, 0.03));
        let t2 = RigidTransform::from_yaw(0.02, Vector3::new(0.05, 0.04, 0.03));
        let combined = t1.compose(&t2);
        let single = ego_align(&v, &combined);
        let double = ego_align(&ego_align(&v, &t1), &t2);
        let mut err_single: f64 = 0.0;
        let mut err_double: f64 = 0.0;
        for i in 2..10 {
            for j in 2..10 {
                for k in 2..6 {
                    let exact = f(combined.transform_point(&spec.voxel_center(i, j, k)));
                    err_single = err_single.max((single.at(i, j, k)[0] - exact).abs());
                    err_double = err_double.max((double.at(i, j, k)[0] - exact).abs());
                }
            }
        }
        assert!(err_single > 0.0 && err_single < 0.05, "single {err_single:.2e}");
        assert!(
            err_double <= 2.0 * err_single + 1e-12,
            "double {err_double:.2e} vs single {err_single:.2e}"
        );
    }

    #[test]
    fn constant_volume_flattens_to_constant_slices() {
        let v = {
            let mut v = FeatureVolume::new_zero(spec_cube(), 2);
            v.data.fill(0.75);
            v
        };
        let bev = volume_to_bev(&v);
        assert_eq!(bev.slices.len(), 5);
        for s in &bev.slices {
            assert!(s.data.iter().all(|x| *x == 0.75));
        }
    }

    #[test]
    fn bev_round_trip_restores_the_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = random_volume(&spec_cube(), 3, &mut rng);
        let bev = volume_to_bev(&v);
        let (rebuilt, global) = slices_to_volume(&bev).unwrap();
        assert_eq!(rebuilt.data, v.data);
        assert_eq!(&global, bev.global());
    }

    #[test]
    fn truncated_stack_fails_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bev = volume_to_bev(&random_volume(&spec_cube(), 1, &mut rng));
        bev.slices.pop();
        assert!(matches!(
            slices_to_volume(&bev),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn zero_offsets_average_to_the_reference_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let value = random_plane(5, 4, 3, &mut rng);
        let params =
            DeformAttnParams::new(1, 2, 3, vec![[0.0, 0.0]; 6], vec![1.0; 6], 1.0).unwrap();
        let out = deformable_attention(&value, &[&value], &params).unwrap();
        for (a, b) in out.data.iter().zip(&value.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_linear_in_the_value_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_plane(6, 6, 2, &mut rng);
        let b = random_plane(6, 6, 2, &mut rng);
        let query = FeaturePlane::new_zero(6, 6, 2);
        let params = DeformAttnParams::random(1, 2, 2, 1.0, &mut rng);
        let out_a = deformable_attention(&query, &[&a], &params).unwrap();
        let out_b = deformable_attention(&query, &[&b], &params).unwrap();
        let mix = FeaturePlane {
            rows: 6,
            cols: 6,
            channels: 2,
            data: a.data.iter().zip(&b.data).map(|(x, y)| 2.0 * x - 0.5 * y).collect(),
        };
        let out_mix = deformable_attention(&query, &[&mix], &params).unwrap();
        for ((m, x), y) in out_mix.data.iter().zip(&out_a.data).zip(&out_b.data) {
            assert!((m - (2.0 * x - 0.5 * y)).abs() < 1e-9);
        }
    }

    #[test]
    fn mismatched_value_shape_is_rejected() {
        let query = FeaturePlane::new_zero(5, 5, 2);
        let narrow = FeaturePlane::new_zero(5, 4, 2);
        let params = DeformAttnParams::new(1, 1, 1, vec![[0.0, 0.0]], vec![1.0], 1.0).unwrap();
        assert!(matches!(
            deformable_attention(&query, &[&narrow], &params),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            deformable_attention(&query, &[&query, &query], &params),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_attention_parameters_are_rejected() {
        assert!(DeformAttnParams::new(1, 1, 2, vec![[0.0, 0.0]; 2], vec![1.0], 1.0).is_err());
        assert!(DeformAttnParams::new(1, 1, 1, vec![[0.0, 0.0]], vec![-1.0], 1.0).is_err());
        assert!(DeformAttnParams::new(1, 1, 1, vec![[0.0, 0.0]], vec![0.0], 1.0).is_err());
        assert!(DeformAttnParams::new(0, 1, 1, vec![], vec![], 1.0).is_err());
        assert!(
            DeformAttnParams::new(1, 1, 1, vec![[f64::NAN, 0.0]], vec![1.0], 1.0).is_err()
        );
    }

    proptest! {
        #[test]
        fn attention_weights_normalize_to_one(raw in proptest::collection::vec(0.01f64..4.0, 6)) {
            let params =
                DeformAttnParams::new(1, 2, 3, vec![[0.0, 0.0]; 6], raw, 0.5).unwrap();
            let total: f64 = params.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(params.weights.iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn temporal_attention_with_zero_scale_is_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = spec_cube();
        let seq: Vec<BevSlices> = (0..4)
            .map(|_| volume_to_bev(&random_volume(&spec, 2, &mut rng)))
            .collect();
        let params = DeformAttnParams::random(2, 1, 3, 0.0, &mut rng);
        assert_eq!(bfam(&seq, &params).unwrap(), seq);
        assert_eq!(bfam(&seq[..1], &params).unwrap(), seq[..1]);
    }

    #[test]
    fn temporal_attention_matches_the_hand_unrolled_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = spec_cube();
        let seq: Vec<BevSlices> = (0..3)
            .map(|_| volume_to_bev(&random_volume(&spec, 2, &mut rng)))
            .collect();
        let params = DeformAttnParams::random(2, 2, 2, 0.6, &mut rng);
        let fused = bfam(&seq, &params).unwrap();

        // seq[2] is the current frame; backward touches 1 then 0, forward
        // returns through 1 to 2, each reading (neighbor, self).
        let mut trace = seq;
        for (tgt, src) in [(1usize, 2usize), (0, 1), (1, 0), (2, 1)] {
            for z in 0..trace[tgt].slices.len() {
                let d = deformable_attention(
                    &trace[tgt].slices[z],
                    &[&trace[src].slices[z], &trace[tgt].slices[z]],
                    &params,
                )
                .unwrap();
                for (x, dx) in trace[tgt].slices[z].data.iter_mut().zip(&d.data) {
                    *x += params.beta * dx;
                }
            }
        }
        assert_eq!(fused, trace);
    }

    #[test]
    fn temporal_attention_rejects_misconfigured_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let seq = vec![volume_to_bev(&random_volume(&spec_cube(), 2, &mut rng))];
        let one_map = DeformAttnParams::random(1, 1, 1, 0.5, &mut rng);
        assert!(matches!(bfam(&seq, &one_map), Err(Error::Config(_))));
        let two_maps = DeformAttnParams::random(2, 1, 1, 0.5, &mut rng);
        assert!(matches!(bfam(&[], &two_maps), Err(Error::Config(_))));
    }

    #[test]
    fn saturated_gates_bracket_the_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let v = random_volume(&spec_cube(), 2, &mut rng);
        let b_g = random_plane(6, 6, 2, &mut rng);
        let closed = GateParams { weight: vec![0.0; 4], bias: vec![-800.0; 2] };
        assert_eq!(bev_volume_fuse(&v, &b_g, &closed).unwrap().data, v.data);

        let open = GateParams { weight: vec![0.0; 4], bias: vec![800.0; 2] };
        let out = bev_volume_fuse(&v, &b_g, &open).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..4 {
                    for c in 0..2 {
                        assert_eq!(out.at(i, j, k)[c], v.at(i, j, k)[c] + b_g.at(i, j)[c]);
                    }
                }
            }
        }
    }

    #[test]
    fn gate_shape_mismatches_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let v = random_volume(&spec_cube(), 2, &mut rng);
        let wrong_plane = random_plane(6, 5, 2, &mut rng);
        let gate = GateParams::random(2, &mut rng);
        assert!(matches!(
            bev_volume_fuse(&v, &wrong_plane, &gate),
            Err(Error::DimensionMismatch(_))
        ));
        let b_g = random_plane(6, 6, 2, &mut rng);
        let wrong_gate = GateParams::random(3, &mut rng);
        assert!(matches!(
            bev_volume_fuse(&v, &b_g, &wrong_gate),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_plane_lift_is_constant_along_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let spec = GridSpec::new([4, 3, 5], [0.0, 0.0, 0.0], [0.5, 0.5, 0.5]).unwrap();
        let t_hw = random_plane(4, 3, 2, &mut rng);
        let zh = FeaturePlane::new_zero(5, 4, 2);
        let wz = FeaturePlane::new_zero(3, 5, 2);
        let v = tpv_lift(&t_hw, &zh, &wz, &spec).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                for k in 0..5 {
                    assert_eq!(v.at(i, j, k), t_hw.at(i, j));
                }
            }
        }
    }

    #[test]
    fn constant_planes_lift_to_their_sum() {
        let spec = GridSpec::new([3, 3, 3], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
        let a = FeaturePlane::from_fn(3, 3, 1, |_, _, _| 0.5);
        let b = FeaturePlane::from_fn(3, 3, 1, |_, _, _| 0.25);
        let c = FeaturePlane::from_fn(3, 3, 1, |_, _, _| -2.0);
        let v = tpv_lift(&a, &b, &c, &spec).unwrap();
        assert!(v.data.iter().all(|x| *x == -1.25));
    }

    #[test]
    fn lift_is_linear_in_each_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = GridSpec::new([4, 4, 4], [0.0, 0.0, 0.0], [0.5, 0.5, 0.5]).unwrap();
        let zero = FeaturePlane::new_zero(4, 4, 2);
        let hw = random_plane(4, 4, 2, &mut rng);
        let zh = random_plane(4, 4, 2, &mut rng);
        let wz = random_plane(4, 4, 2, &mut rng);
        let whole = tpv_lift(&hw, &zh, &wz, &spec).unwrap();
        let parts = [
            tpv_lift(&hw, &zero, &zero, &spec).unwrap(),
            tpv_lift(&zero, &zh, &zero, &spec).unwrap(),
            tpv_lift(&zero, &zero, &wz, &spec).unwrap(),
        ];
        for at in 0..whole.data.len() {
            let sum: f64 = parts.iter().map(|p| p.data[at]).sum();
            assert!((whole.data[at] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn lift_rejects_mismatched_planes() {
        let spec = GridSpec::new([4, 3, 5], [0.0, 0.0, 0.0], [0.5, 0.5, 0.5]).unwrap();
        let hw = FeaturePlane::new_zero(4, 3, 2);
        let zh = FeaturePlane::new_zero(5, 4, 2);
        let bad_wz = FeaturePlane::new_zero(5, 3, 2);
        assert!(matches!(
            tpv_lift(&hw, &zh, &bad_wz, &spec),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
