//! Dense voxel fields over an axis-aligned grid.
//!
//! Conventions, shared by every consumer in the crate:
//! - dims are (H, W, Z) along world x (forward), y (left), z (up);
//! - values live at voxel centers: `center(i,j,k) = origin + (idx + 0.5) * voxel`;
//! - storage is row-major over (i, j, k) with i slowest and k fastest,
//!   channels innermost;
//! - trilinear sampling outside the convex hull of voxel centers clamps to the
//!   boundary value (geometry fields). Feature gathers that want zero padding
//!   instead use [`FeatureVolume::sample_zero`].

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Geometry of a voxel grid: dims (H, W, Z), world origin of the minimum
/// corner, and per-axis voxel edge lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
}

/// Trilinear interpolation footprint: 8 voxel indices (channel-0 linear
/// indices) and their convex weights. Degenerate axes repeat indices.
#[derive(Debug, Clone, Copy)]
pub struct TrilinearStencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], origin: [f64; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let spec = GridSpec {
            dims,
            origin,
            voxel_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::DimensionMismatch(format!(
                "grid dims must be positive, got {:?}",
                self.dims
            )));
        }
        if self.voxel_size.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!(
                "voxel size must be positive and finite, got {:?}",
                self.voxel_size
            )));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index of voxel (i, j, k); i slowest, k fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    /// World position of the voxel center.
    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + (i as f64 + 0.5) * self.voxel_size[0],
            self.origin[1] + (j as f64 + 0.5) * self.voxel_size[1],
            self.origin[2] + (k as f64 + 0.5) * self.voxel_size[2],
        )
    }

    /// Continuous grid coordinates: voxel center (i, j, k) maps to (i, j, k).
    #[inline]
    pub fn world_to_grid(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            (p.x - self.origin[0]) / self.voxel_size[0] - 0.5,
            (p.y - self.origin[1]) / self.voxel_size[1] - 0.5,
            (p.z - self.origin[2]) / self.voxel_size[2] - 0.5,
        )
    }

    /// Axis-aligned bounds of the full volume (voxel faces, not centers).
    pub fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        let lo = Vector3::new(self.origin[0], self.origin[1], self.origin[2]);
        let hi = Vector3::new(
            self.origin[0] + self.dims[0] as f64 * self.voxel_size[0],
            self.origin[1] + self.dims[1] as f64 * self.voxel_size[1],
            self.origin[2] + self.dims[2] as f64 * self.voxel_size[2],
        );
        (lo, hi)
    }

    /// Clamp-to-boundary trilinear footprint at world point `p`.
    pub fn trilinear_stencil(&self, p: &Vector3<f64>) -> TrilinearStencil {
        let u = self.world_to_grid(p);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let uc = u[a].clamp(0.0, (n - 1) as f64);
            if n == 1 {
                base[a] = 0;
                frac[a] = 0.0;
            } else {
                let i0 = (uc.floor() as usize).min(n - 2);
                base[a] = i0;
                frac[a] = uc - i0 as f64;
            }
        }
        let step = |a: usize| if self.dims[a] == 1 { 0 } else { 1 };
        let (si, sj, sk) = (step(0), step(1), step(2));
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        let mut c = 0;
        for di in 0..2usize {
            for dj in 0..2usize {
                for dk in 0..2usize {
                    idx[c] = self.index(base[0] + di * si, base[1] + dj * sj, base[2] + dk * sk);
                    w[c] = if di == 0 { gx } else { fx }
                        * if dj == 0 { gy } else { fy }
                        * if dk == 0 { gz } else { fz };
                    c += 1;
                }
            }
        }
        TrilinearStencil { idx, w }
    }
}

/// Single-channel field (signed distances, probabilities, masks-as-floats).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub spec: GridSpec,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn new_filled(spec: GridSpec, value: f64) -> Self {
        let n = spec.n_voxels();
        ScalarField {
            spec,
            data: vec![value; n],
        }
    }

    /// Builds a field by evaluating `f` at every voxel center.
    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(Vector3<f64>) -> f64) -> Self {
        let mut data = vec![0.0; spec.n_voxels()];
        for i in 0..spec.dims[0] {
            for j in 0..spec.dims[1] {
                for k in 0..spec.dims[2] {
                    data[spec.index(i, j, k)] = f(spec.voxel_center(i, j, k));
                }
            }
        }
        ScalarField { spec, data }
    }

    /// Clamp-to-boundary trilinear sample.
    #[inline]
    pub fn sample_trilinear(&self, p: &Vector3<f64>) -> f64 {
        let st = self.spec.trilinear_stencil(p);
        self.sample_stencil(&st)
    }

    /// Sample through a precomputed stencil.
    #[inline]
    pub fn sample_stencil(&self, st: &TrilinearStencil) -> f64 {
        let mut acc = 0.0;
        for c in 0..8 {
            let v = self.data[st.idx[c]];
            debug_assert!(v.is_finite(), "NaN/inf in scalar field");
            acc += st.w[c] * v;
        }
        acc
    }
}

/// Two-channel horizontal flow field (meters per frame along world x, y).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub spec: GridSpec,
    pub data: Vec<f64>,
}

impl VectorField {
    pub fn new_zero(spec: GridSpec) -> Self {
        let n = spec.n_voxels() * 2;
        VectorField {
            spec,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(Vector3<f64>) -> [f64; 2]) -> Self {
        let mut data = vec![0.0; spec.n_voxels() * 2];
        for i in 0..spec.dims[0] {
            for j in 0..spec.dims[1] {
                for k in 0..spec.dims[2] {
                    let v = f(spec.voxel_center(i, j, k));
                    let at = spec.index(i, j, k) * 2;
                    data[at] = v[0];
                    data[at + 1] = v[1];
                }
            }
        }
        VectorField { spec, data }
    }

    #[inline]
    pub fn sample_trilinear(&self, p: &Vector3<f64>) -> [f64; 2] {
        let st = self.spec.trilinear_stencil(p);
        self.sample_stencil(&st)
    }

    #[inline]
    pub fn sample_stencil(&self, st: &TrilinearStencil) -> [f64; 2] {
        let mut acc = [0.0f64; 2];
        for c in 0..8 {
            let at = st.idx[c] * 2;
            debug_assert!(
                self.data[at].is_finite() && self.data[at + 1].is_finite(),
                "NaN/inf in vector field"
            );
            acc[0] += st.w[c] * self.data[at];
            acc[1] += st.w[c] * self.data[at + 1];
        }
        acc
    }
}

/// C-channel feature volume; used by the finite-difference operators and the
/// fusion kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub spec: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new_zero(spec: GridSpec, channels: usize) -> Self {
        let n = spec.n_voxels() * channels;
        FeatureVolume {
            spec,
            channels,
            data: vec![0.0; n],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let at = self.spec.index(i, j, k) * self.channels;
        &self.data[at..at + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, k: usize) -> &mut [f64] {
        let at = self.spec.index(i, j, k) * self.channels;
        &mut self.data[at..at + self.channels]
    }

    /// Clamp-to-boundary trilinear sample of all channels into `out`.
    pub fn sample_into(&self, p: &Vector3<f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        let st = self.spec.trilinear_stencil(p);
        self.sample_stencil_into(&st, out);
    }

    pub fn sample_stencil_into(&self, st: &TrilinearStencil, out: &mut [f64]) {
        out.fill(0.0);
        for c in 0..8 {
            let at = st.idx[c] * self.channels;
            for ch in 0..self.channels {
                out[ch] += st.w[c] * self.data[at + ch];
            }
        }
    }

    /// Zero-padding trilinear sample: corners outside the voxel-center hull
    /// contribute zeros instead of clamping. Used for feature warping.
    pub fn sample_zero(&self, p: &Vector3<f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        let u = self.spec.world_to_grid(p);
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
                        || ci >= self.spec.dims[0] as i64
                        || cj >= self.spec.dims[1] as i64
                        || ck >= self.spec.dims[2] as i64
                    {
                        continue;
                    }
                    let w = if di == 0 { 1.0 - frac[0] } else { frac[0] }
                        * if dj == 0 { 1.0 - frac[1] } else { frac[1] }
                        * if dk == 0 { 1.0 - frac[2] } else { frac[2] };
                    let at = self.spec.index(ci as usize, cj as usize, ck as usize) * self.channels;
                    for ch in 0..self.channels {
                        out[ch] += w * self.data[at + ch];
                    }
                }
            }
        }
    }
}

/// Occupancy probabilities plus their 0.5-threshold binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub prob: Vec<f64>,
    pub binary: Vec<bool>,
}

/// First spatial derivatives of a scalar field, one channel per axis.
///
/// Central differences over 2h in the interior, one-sided differences over h
/// on boundary planes.
pub fn sdf_gradient(field: &ScalarField) -> FeatureVolume {
    let spec = field.spec.clone();
    let [nx, ny, nz] = spec.dims;
    let h = spec.voxel_size;
    let mut out = FeatureVolume::new_zero(spec.clone(), 3);
    let d1 = |lo: f64, hi: f64, span: f64| (hi - lo) / span;
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let v = |ii: usize, jj: usize, kk: usize| field.data[spec.index(ii, jj, kk)];
                let gx = if nx == 1 {
                    0.0
                } else if i == 0 {
                    d1(v(0, j, k), v(1, j, k), h[0])
                } else if i == nx - 1 {
                    d1(v(nx - 2, j, k), v(nx - 1, j, k), h[0])
                } else {
                    d1(v(i - 1, j, k), v(i + 1, j, k), 2.0 * h[0])
                };
                let gy = if ny == 1 {
                    0.0
                } else if j == 0 {
                    d1(v(i, 0, k), v(i, 1, k), h[1])
                } else if j == ny - 1 {
                    d1(v(i, ny - 2, k), v(i, ny - 1, k), h[1])
                } else {
                    d1(v(i, j - 1, k), v(i, j + 1, k), 2.0 * h[1])
                };
                let gz = if nz == 1 {
                    0.0
                } else if k == 0 {
                    d1(v(i, j, 0), v(i, j, 1), h[2])
                } else if k == nz - 1 {
                    d1(v(i, j, nz - 2), v(i, j, nz - 1), h[2])
                } else {
                    d1(v(i, j, k - 1), v(i, j, k + 1), 2.0 * h[2])
                };
                let o = out.at_mut(i, j, k);
                o[0] = gx;
                o[1] = gy;
                o[2] = gz;
            }
        }
    }
    out
}

/// Scatter-add the adjoint of [`sdf_gradient`]: given dL/d(gradient volume),
/// accumulate dL/d(field values). Exact transpose of the forward stencils.
pub fn sdf_gradient_backward(spec: &GridSpec, grad_adj: &FeatureVolume, field_adj: &mut [f64]) {
    let [nx, ny, nz] = spec.dims;
    let h = spec.voxel_size;
    assert_eq!(grad_adj.channels, 3);
    assert_eq!(field_adj.len(), spec.n_voxels());
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let a = grad_adj.at(i, j, k);
                // x channel
                if nx > 1 {
                    if i == 0 {
                        field_adj[spec.index(1, j, k)] += a[0] / h[0];
                        field_adj[spec.index(0, j, k)] -= a[0] / h[0];
                    } else if i == nx - 1 {
                        field_adj[spec.index(nx - 1, j, k)] += a[0] / h[0];
                        field_adj[spec.index(nx - 2, j, k)] -= a[0] / h[0];
                    } else {
                        field_adj[spec.index(i + 1, j, k)] += a[0] / (2.0 * h[0]);
                        field_adj[spec.index(i - 1, j, k)] -= a[0] / (2.0 * h[0]);
                    }
                }
                if ny > 1 {
                    if j == 0 {
                        field_adj[spec.index(i, 1, k)] += a[1] / h[1];
                        field_adj[spec.index(i, 0, k)] -= a[1] / h[1];
                    } else if j == ny - 1 {
                        field_adj[spec.index(i, ny - 1, k)] += a[1] / h[1];
                        field_adj[spec.index(i, ny - 2, k)] -= a[1] / h[1];
                    } else {
                        field_adj[spec.index(i, j + 1, k)] += a[1] / (2.0 * h[1]);
                        field_adj[spec.index(i, j - 1, k)] -= a[1] / (2.0 * h[1]);
                    }
                }
                if nz > 1 {
                    if k == 0 {
                        field_adj[spec.index(i, j, 1)] += a[2] / h[2];
                        field_adj[spec.index(i, j, 0)] -= a[2] / h[2];
                    } else if k == nz - 1 {
                        field_adj[spec.index(i, j, nz - 1)] += a[2] / h[2];
                        field_adj[spec.index(i, j, nz - 2)] -= a[2] / h[2];
                    } else {
                        field_adj[spec.index(i, j, k + 1)] += a[2] / (2.0 * h[2]);
                        field_adj[spec.index(i, j, k - 1)] -= a[2] / (2.0 * h[2]);
                    }
                }
            }
        }
    }
}

/// Channel order of [`sdf_second_differences`].
pub const HESSIAN_CHANNELS: [&str; 6] = ["xx", "yy", "zz", "xy", "xz", "yz"];

/// Second-difference estimates of the six distinct Hessian entries, divided
/// by the voxel-size products. Interior voxels only; the boundary ring is 0.
pub fn sdf_second_differences(field: &ScalarField) -> FeatureVolume {
    let spec = field.spec.clone();
    let [nx, ny, nz] = spec.dims;
    let h = spec.voxel_size;
    let mut out = FeatureVolume::new_zero(spec.clone(), 6);
    if nx < 3 || ny < 3 || nz < 3 {
        return out;
    }
    for i in 1..nx - 1 {
        for j in 1..ny - 1 {
            for k in 1..nz - 1 {
                let v = |ii: usize, jj: usize, kk: usize| field.data[spec.index(ii, jj, kk)];
                let c = v(i, j, k);
                let o = out.at_mut(i, j, k);
                o[0] = (v(i + 1, j, k) - 2.0 * c + v(i - 1, j, k)) / (h[0] * h[0]);
                o[1] = (v(i, j + 1, k) - 2.0 * c + v(i, j - 1, k)) / (h[1] * h[1]);
                o[2] = (v(i, j, k + 1) - 2.0 * c + v(i, j, k - 1)) / (h[2] * h[2]);
                o[3] = (v(i + 1, j + 1, k) - v(i + 1, j - 1, k) - v(i - 1, j + 1, k)
                    + v(i - 1, j - 1, k))
                    / (4.0 * h[0] * h[1]);
                o[4] = (v(i + 1, j, k + 1) - v(i + 1, j, k - 1) - v(i - 1, j, k + 1)
                    + v(i - 1, j, k - 1))
                    / (4.0 * h[0] * h[2]);
                o[5] = (v(i, j + 1, k + 1) - v(i, j + 1, k - 1) - v(i, j - 1, k + 1)
                    + v(i, j - 1, k - 1))
                    / (4.0 * h[1] * h[2]);
            }
        }
    }
    out
}

/// Scatter-add the adjoint of [`sdf_second_differences`]: given dL/d(channel
/// volume), accumulate dL/d(field values). Exact transpose of the forward
/// stencils; boundary-ring adjoints are ignored (the forward writes 0 there).
pub fn sdf_second_differences_backward(
    spec: &GridSpec,
    adj: &FeatureVolume,
    field_adj: &mut [f64],
) {
    let [nx, ny, nz] = spec.dims;
    let h = spec.voxel_size;
    assert_eq!(adj.channels, 6);
    assert_eq!(field_adj.len(), spec.n_voxels());
    if nx < 3 || ny < 3 || nz < 3 {
        return;
    }
    for i in 1..nx - 1 {
        for j in 1..ny - 1 {
            for k in 1..nz - 1 {
                let a = adj.at(i, j, k);
                let mut add = |ii: usize, jj: usize, kk: usize, v: f64| {
                    field_adj[spec.index(ii, jj, kk)] += v;
                };
                let (sxx, syy, szz) = (a[0] / (h[0] * h[0]), a[1] / (h[1] * h[1]), a[2] / (h[2] * h[2]));
                add(i + 1, j, k, sxx);
                add(i - 1, j, k, sxx);
                add(i, j + 1, k, syy);
                add(i, j - 1, k, syy);
                add(i, j, k + 1, szz);
                add(i, j, k - 1, szz);
                add(i, j, k, -2.0 * (sxx + syy + szz));
                let sxy = a[3] / (4.0 * h[0] * h[1]);
                add(i + 1, j + 1, k, sxy);
                add(i + 1, j - 1, k, -sxy);
                add(i - 1, j + 1, k, -sxy);
                add(i - 1, j - 1, k, sxy);
                let sxz = a[4] / (4.0 * h[0] * h[2]);
                add(i + 1, j, k + 1, sxz);
                add(i + 1, j, k - 1, -sxz);
                add(i - 1, j, k + 1, -sxz);
                add(i - 1, j, k - 1, sxz);
                let syz = a[5] / (4.0 * h[1] * h[2]);
                add(i, j + 1, k + 1, syz);
                add(i, j + 1, k - 1, -syz);
                add(i, j - 1, k + 1, -syz);
                add(i, j - 1, k - 1, syz);
            }
        }
    }
}

/// Logistic occupancy mapping: `prob = 1 / (1 + exp(xi * sdf))`, binarized at
/// `prob >= 0.5` (equivalently `sdf <= 0`).
pub fn sdf_to_occupancy(field: &ScalarField, xi: f64) -> OccupancyGrid {
    assert!(xi > 0.0, "occupancy sharpness must be positive");
    let n = field.data.len();
    let mut prob = Vec::with_capacity(n);
    let mut binary = Vec::with_capacity(n);
    for &s in &field.data {
        // Stable logistic of -xi*s.
        let z = -xi * s;
        let p = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        prob.push(p);
        binary.push(s <= 0.0);
    }
    OccupancyGrid {
        spec: field.spec.clone(),
        prob,
        binary,
    }
}
