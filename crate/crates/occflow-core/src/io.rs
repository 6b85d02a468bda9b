//! On-disk workspace format, asset codecs, and run configuration.
//!
//! A workspace is a directory rooted at `manifest.toml`. The manifest names
//! every asset by a path relative to the root; loading checks existence and
//! shape eagerly so a typo surfaces as one error naming the offending file.
//!
//! Layout written by [`save_workspace`]:
//!
//! ```text
//! manifest.toml                     camera intrinsics + asset paths
//! config.toml                       run configuration (optional)
//! poses.txt                         per-frame ego-to-world, 4x4 row-major text
//! cameras.txt                       per-camera camera-to-ego, same format
//! frames/000/cam0/image.ppm         P6, maxval 255
//! frames/000/cam0/movable.pgm       P5, 0 or 255
//! frames/000/cam0/cue_fwd.flo       optical-flow cue to the next frame
//! frames/000/cam0/cue_bwd_000.flo   cue to an earlier frame (suffix = target)
//! frames/000/cam0/gt_depth.pfm      evaluation-only ground truth (optional)
//! frames/000/cam0/gt_flow.flo
//! frames/000/lidar.txt              "x y z" per line, frame-ego coordinates
//! truth/{sdf,flow,movable}.grid     voxelized oracle (synthetic scenes only)
//! ```
//!
//! Grid files: magic `OCCF`, u32 version 1, u32 H W Z C, 3xf64 origin,
//! 3xf64 voxel size, then H*W*Z*C little-endian f32 in memory layout
//! (channels fastest, then z, then y, then x). PFM scale is always written
//! negative (little-endian); positive-scale files read as big-endian. `.flo`
//! is the Middlebury format: magic `PIEH`, little-endian i32 width and
//! height, interleaved f32 (u, v) rows top-down.
//!
//! Manifest and config are TOML with strict parsing: unknown keys are
//! rejected so misspelled settings fail loudly instead of silently keeping a
//! default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{Camera, FrameData, FrameSet, Intrinsics, RigidTransform};
use crate::grid::{sdf_to_occupancy, GridSpec, ScalarField, VectorField};
use crate::maps::{FlowMap, ImageRgb, MaskMap, ScalarMap};
use crate::optimizer::{FitConfig, IterStats};
use crate::renderer::RenderParams;
use crate::supervision::LossWeights;
use crate::synth::GroundTruth;
use crate::Result;

const GRID_MAGIC: &[u8; 4] = b"OCCF";
const GRID_VERSION: u32 = 1;
const FLO_MAGIC: &[u8; 4] = b"PIEH";

fn ps(path: &Path) -> String {
    path.display().to_string()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::codec(ps(path), format!("read failed: {e}")))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::codec(ps(path), format!("write failed: {e}")))
}

/// Byte cursor for the binary readers; every failure names the file.
struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Cursor { path, bytes, off: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::codec(
                ps(self.path),
                format!(
                    "truncated: wanted {} bytes at offset {}, file has {}",
                    n,
                    self.off,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.off
    }
}

// ---------------------------------------------------------------------------
// Grid codec
// ---------------------------------------------------------------------------

fn write_grid(path: &Path, spec: &GridSpec, channels: usize, data: &[f64]) -> Result<()> {
    assert_eq!(data.len(), spec.n_voxels() * channels, "grid payload size");
    let mut buf = Vec::with_capacity(72 + data.len() * 4);
    buf.extend_from_slice(GRID_MAGIC);
    buf.extend_from_slice(&GRID_VERSION.to_le_bytes());
    for d in spec.dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::codec(ps(path), format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    let c = u32::try_from(channels)
        .map_err(|_| Error::codec(ps(path), format!("channel count {channels} exceeds u32")))?;
    buf.extend_from_slice(&c.to_le_bytes());
    for o in spec.origin {
        buf.extend_from_slice(&o.to_le_bytes());
    }
    for v in spec.voxel_size {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_bytes(path, &buf)
}

fn read_grid(path: &Path) -> Result<(GridSpec, usize, Vec<f64>)> {
    let bytes = read_bytes(path)?;
    let mut cur = Cursor::new(path, &bytes);
    if cur.take(4)? != GRID_MAGIC {
        return Err(Error::codec(ps(path), "bad magic, expected OCCF"));
    }
    let version = cur.u32()?;
    if version != GRID_VERSION {
        return Err(Error::codec(
            ps(path),
            format!("unsupported version {version}, expected {GRID_VERSION}"),
        ));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = cur.u32()? as usize;
    }
    let channels = cur.u32()? as usize;
    let mut origin = [0.0f64; 3];
    for o in &mut origin {
        *o = cur.f64()?;
    }
    let mut voxel_size = [0.0f64; 3];
    for v in &mut voxel_size {
        *v = cur.f64()?;
    }
    let spec = GridSpec {
        dims,
        origin,
        voxel_size,
    };
    spec.validate()
        .map_err(|e| Error::codec(ps(path), format!("bad grid header: {e}")))?;
    if channels == 0 {
        return Err(Error::codec(ps(path), "channel count must be positive"));
    }
    let n = spec
        .n_voxels()
        .checked_mul(channels)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::codec(ps(path), "grid size overflows"))?;
    if cur.remaining() != n * 4 {
        return Err(Error::codec(
            ps(path),
            format!("payload is {} bytes, header implies {}", cur.remaining(), n * 4),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64);
    }
    Ok((spec, channels, data))
}

pub fn save_scalar_grid(path: &Path, field: &ScalarField) -> Result<()> {
    write_grid(path, &field.spec, 1, &field.data)
}

pub fn load_scalar_grid(path: &Path) -> Result<ScalarField> {
    let (spec, channels, data) = read_grid(path)?;
    if channels != 1 {
        return Err(Error::codec(
            ps(path),
            format!("expected 1 channel, file has {channels}"),
        ));
    }
    Ok(ScalarField { spec, data })
}

pub fn save_vector_grid(path: &Path, field: &VectorField) -> Result<()> {
    write_grid(path, &field.spec, 2, &field.data)
}

pub fn load_vector_grid(path: &Path) -> Result<VectorField> {
    let (spec, channels, data) = read_grid(path)?;
    if channels != 2 {
        return Err(Error::codec(
            ps(path),
            format!("expected 2 channels, file has {channels}"),
        ));
    }
    Ok(VectorField { spec, data })
}

// ---------------------------------------------------------------------------
// NetPBM (PPM P6 images, PGM P5 masks)
// ---------------------------------------------------------------------------

/// Parses a NetPBM header: magic, width, height, maxval, then exactly one
/// whitespace byte before the binary payload. `#` comments are honored.
fn pbm_header(path: &Path, bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::with_capacity(4);
    while tokens.len() < 4 {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if pos == start {
            return Err(Error::codec(ps(path), "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::codec(ps(path), "missing separator after maxval"));
    }
    pos += 1;
    if tokens[0] != magic {
        return Err(Error::codec(
            ps(path),
            format!("bad magic `{}`, expected `{magic}`", tokens[0]),
        ));
    }
    let dim = |t: &str, what: &str| -> Result<usize> {
        let v: usize = t
            .parse()
            .map_err(|_| Error::codec(ps(path), format!("bad {what} `{t}`")))?;
        if v == 0 {
            return Err(Error::codec(ps(path), format!("{what} must be positive")));
        }
        Ok(v)
    };
    let w = dim(&tokens[1], "width")?;
    let h = dim(&tokens[2], "height")?;
    if tokens[3] != "255" {
        return Err(Error::codec(
            ps(path),
            format!("unsupported maxval `{}`, expected 255", tokens[3]),
        ));
    }
    Ok((w, h, pos))
}

pub fn save_image_ppm(path: &Path, img: &ImageRgb) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.reserve(img.data.len());
    for &v in &img.data {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    write_bytes(path, &buf)
}

pub fn load_image_ppm(path: &Path) -> Result<ImageRgb> {
    let bytes = read_bytes(path)?;
    let (w, h, off) = pbm_header(path, &bytes, "P6")?;
    let n = w * h * 3;
    if bytes.len() - off != n {
        return Err(Error::codec(
            ps(path),
            format!("payload is {} bytes, header implies {n}", bytes.len() - off),
        ));
    }
    let data = bytes[off..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(ImageRgb {
        width: w,
        height: h,
        data,
    })
}

pub fn save_mask_pgm(path: &Path, mask: &MaskMap) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    buf.reserve(mask.data.len());
    for &b in &mask.data {
        buf.push(if b { 255 } else { 0 });
    }
    write_bytes(path, &buf)
}

pub fn load_mask_pgm(path: &Path) -> Result<MaskMap> {
    let bytes = read_bytes(path)?;
    let (w, h, off) = pbm_header(path, &bytes, "P5")?;
    let n = w * h;
    if bytes.len() - off != n {
        return Err(Error::codec(
            ps(path),
            format!("payload is {} bytes, header implies {n}", bytes.len() - off),
        ));
    }
    let data = bytes[off..].iter().map(|&b| b >= 128).collect();
    Ok(MaskMap {
        width: w,
        height: h,
        data,
    })
}

// ---------------------------------------------------------------------------
// PFM scalar maps
// ---------------------------------------------------------------------------

pub fn save_scalar_pfm(path: &Path, map: &ScalarMap) -> Result<()> {
    let mut buf = format!("Pf\n{} {}\n-1\n", map.width, map.height).into_bytes();
    buf.reserve(map.data.len() * 4);
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            buf.extend_from_slice(&(map.get(x, y) as f32).to_le_bytes());
        }
    }
    write_bytes(path, &buf)
}

pub fn load_scalar_pfm(path: &Path) -> Result<ScalarMap> {
    let bytes = read_bytes(path)?;
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::codec(ps(path), "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::codec(ps(path), "missing separator after scale"));
    }
    pos += 1;
    if tokens[0] != "Pf" {
        return Err(Error::codec(
            ps(path),
            format!("bad magic `{}`, expected `Pf`", tokens[0]),
        ));
    }
    let w: usize = tokens[1]
        .parse()
        .map_err(|_| Error::codec(ps(path), format!("bad width `{}`", tokens[1])))?;
    let h: usize = tokens[2]
        .parse()
        .map_err(|_| Error::codec(ps(path), format!("bad height `{}`", tokens[2])))?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::codec(ps(path), format!("bad scale `{}`", tokens[3])))?;
    if w == 0 || h == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(Error::codec(ps(path), "degenerate dimensions or scale"));
    }
    let little_endian = scale < 0.0;
    let n = w * h;
    if bytes.len() - pos != n * 4 {
        return Err(Error::codec(
            ps(path),
            format!("payload is {} bytes, header implies {}", bytes.len() - pos, n * 4),
        ));
    }
    let mut map = ScalarMap::new(w, h);
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            let raw: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
            pos += 4;
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            map.set(x, y, v as f64);
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Middlebury .flo flow maps
// ---------------------------------------------------------------------------

pub fn save_flow_flo(path: &Path, flow: &FlowMap) -> Result<()> {
    let w = i32::try_from(flow.width)
        .map_err(|_| Error::codec(ps(path), "width exceeds i32"))?;
    let h = i32::try_from(flow.height)
        .map_err(|_| Error::codec(ps(path), "height exceeds i32"))?;
    let mut buf = Vec::with_capacity(12 + flow.data.len() * 4);
    buf.extend_from_slice(FLO_MAGIC);
    buf.extend_from_slice(&w.to_le_bytes());
    buf.extend_from_slice(&h.to_le_bytes());
    for &v in &flow.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_bytes(path, &buf)
}

pub fn load_flow_flo(path: &Path) -> Result<FlowMap> {
    let bytes = read_bytes(path)?;
    let mut cur = Cursor::new(path, &bytes);
    if cur.take(4)? != FLO_MAGIC {
        return Err(Error::codec(ps(path), "bad magic, expected PIEH"));
    }
    let w = cur.i32()?;
    let h = cur.i32()?;
    if w <= 0 || h <= 0 {
        return Err(Error::codec(ps(path), format!("bad dimensions {w} x {h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let n = w * h * 2;
    if cur.remaining() != n * 4 {
        return Err(Error::codec(
            ps(path),
            format!("payload is {} bytes, header implies {}", cur.remaining(), n * 4),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64);
    }
    Ok(FlowMap {
        width: w,
        height: h,
        data,
    })
}

// ---------------------------------------------------------------------------
// Text formats: rigid transforms, LiDAR points, metrics, loss log
// ---------------------------------------------------------------------------

/// One 4x4 row-major matrix per transform, rows on separate lines, a blank
/// line between matrices. `{}` formatting round-trips f64 exactly.
pub fn save_transforms(path: &Path, ts: &[RigidTransform]) -> Result<()> {
    let mut s = String::new();
    for t in ts {
        for r in 0..3 {
            let _ = writeln!(
                s,
                "{} {} {} {}",
                t.rotation[(r, 0)],
                t.rotation[(r, 1)],
                t.rotation[(r, 2)],
                t.translation[r]
            );
        }
        s.push_str("0 0 0 1\n\n");
    }
    write_bytes(path, s.as_bytes())
}

pub fn load_transforms(path: &Path) -> Result<Vec<RigidTransform>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let mut vals = Vec::new();
    for tok in text.split_whitespace() {
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::codec(ps(path), format!("bad number `{tok}`")))?;
        vals.push(v);
    }
    if vals.is_empty() || vals.len() % 16 != 0 {
        return Err(Error::codec(
            ps(path),
            format!("expected 4x4 matrices, got {} numbers", vals.len()),
        ));
    }
    let mut out = Vec::with_capacity(vals.len() / 16);
    for (i, m) in vals.chunks_exact(16).enumerate() {
        if m[12..16] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::codec(
                ps(path),
                format!("matrix {i}: bottom row must be `0 0 0 1`"),
            ));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        let t = RigidTransform::new(rotation, translation)
            .map_err(|e| Error::codec(ps(path), format!("matrix {i}: {e}")))?;
        out.push(t);
    }
    Ok(out)
}

pub fn save_points(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    write_bytes(path, s.as_bytes())
}

pub fn load_points(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let mut vals = Vec::new();
    for tok in text.split_whitespace() {
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::codec(ps(path), format!("bad number `{tok}`")))?;
        vals.push(v);
    }
    if vals.len() % 3 != 0 {
        return Err(Error::codec(
            ps(path),
            format!("expected x y z triples, got {} numbers", vals.len()),
        ));
    }
    Ok(vals
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect())
}

/// Flat `name value` lines, one metric per line.
pub fn save_metrics_file(path: &Path, metrics: &[(String, f64)]) -> Result<()> {
    let mut s = String::new();
    for (name, value) in metrics {
        debug_assert!(!name.contains(char::is_whitespace), "metric name `{name}`");
        let _ = writeln!(s, "{name} {value}");
    }
    write_bytes(path, s.as_bytes())
}

pub fn load_metrics_file(path: &Path) -> Result<Vec<(String, f64)>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(name), Some(val), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::codec(
                ps(path),
                format!("line {}: expected `name value`", lineno + 1),
            ));
        };
        let v: f64 = val
            .parse()
            .map_err(|_| Error::codec(ps(path), format!("line {}: bad number `{val}`", lineno + 1)))?;
        out.push((name.to_string(), v));
    }
    Ok(out)
}

/// Line-delimited per-iteration fit log, `key=value` fields.
pub fn save_loss_log(path: &Path, history: &[IterStats]) -> Result<()> {
    let mut s = String::new();
    for st in history {
        let b = &st.breakdown;
        let _ = writeln!(
            s,
            "iter={} stage={} lr={} total={} reproj={} flow_static={} flow_dynamic={} \
             range={} eik={} hessian={} smooth={} dreg={} gamma={}",
            st.iter,
            st.stage,
            st.lr,
            st.total,
            b.reproj,
            b.flow_static,
            b.flow_dynamic,
            b.range,
            b.eik,
            b.hessian,
            b.smooth,
            b.dreg,
            b.gamma
        );
    }
    write_bytes(path, s.as_bytes())
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Everything a run needs beyond the workspace itself. `fit.seed` and
/// `fit.sigma_aux` mirror the top-level `seed` / `sigma_aux` keys of the
/// config file; `sigma_cue` and `synth_*` only matter when generating a
/// synthetic workspace.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub render: RenderParams,
    pub weights: LossWeights,
    pub fit: FitConfig,
    /// Gaussian pixel noise added to synthetic optical-flow cues.
    pub sigma_cue: f64,
    /// Synthetic camera resolution.
    pub synth_width: usize,
    pub synth_height: usize,
}

impl Default for RunConfig {
    /// Published defaults (initial learning rate 1e-4, weight decay 1e-2).
    fn default() -> Self {
        RunConfig {
            grid: GridSpec {
                dims: [64, 64, 32],
                origin: [0.0, -6.4, -0.8],
                voxel_size: [0.2, 0.2, 0.2],
            },
            render: RenderParams::new(50.0, 128),
            weights: LossWeights::default(),
            fit: FitConfig::default(),
            sigma_cue: 0.5,
            synth_width: 256,
            synth_height: 192,
        }
    }
}

impl RunConfig {
    /// Preset tuned for the built-in synthetic scene: a grid fit from scratch
    /// wants a much hotter learning rate and no weight decay, and the short
    /// schedule leaves no room for a 1000-iteration warmup.
    pub fn synthetic() -> Self {
        let mut cfg = RunConfig::default();
        cfg.fit.lr = 0.005;
        cfg.fit.flow_lr_scale = 8.0;
        cfg.fit.weight_decay = 0.0;
        cfg.fit.warmup = 150;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.weights.validate()?;
        self.fit.validate()?;
        if !(self.render.xi > 0.0 && self.render.xi.is_finite()) {
            return Err(Error::Config(format!(
                "render.xi must be positive, got {}",
                self.render.xi
            )));
        }
        if self.render.n_samples < 2 {
            return Err(Error::Config(format!(
                "render.n_samples must be at least 2, got {}",
                self.render.n_samples
            )));
        }
        if !(self.render.weight_threshold >= 0.0 && self.render.weight_threshold < 1.0) {
            return Err(Error::Config(format!(
                "render.weight_threshold must be in [0, 1), got {}",
                self.render.weight_threshold
            )));
        }
        if !(self.render.sample_skip >= 0.0) {
            return Err(Error::Config(format!(
                "render.sample_skip must be non-negative, got {}",
                self.render.sample_skip
            )));
        }
        if !(self.sigma_cue >= 0.0 && self.sigma_cue.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_cue must be non-negative, got {}",
                self.sigma_cue
            )));
        }
        if self.synth_width < 16 || self.synth_height < 16 {
            return Err(Error::Config(format!(
                "synth resolution {}x{} is below the 16-pixel minimum",
                self.synth_width, self.synth_height
            )));
        }
        Ok(())
    }
}

// Serde mirror of RunConfig. Every field is optional so a config file can
// override just the keys it cares about; unknown keys are rejected.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfigDto {
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_aux: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_cue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<GridDto>,
    #[serde(skip_serializing_if = "Option::is_none")]
    render: Option<RenderDto>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<WeightsDto>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<FitDto>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synth: Option<SynthDto>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GridDto {
    #[serde(skip_serializing_if = "Option::is_none")]
    dims: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    origin: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    voxel_size: Option<[f64; 3]>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RenderDto {
    #[serde(skip_serializing_if = "Option::is_none")]
    xi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sample_skip: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct WeightsDto {
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_flow: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_range: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_eik: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_hess: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_smooth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_dreg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    thre: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_si: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_pm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theta_d: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FitDto {
    #[serde(skip_serializing_if = "Option::is_none")]
    total_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage1_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_tiles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_lidar: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flow_lr_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    warmup: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    two_stage: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dynamic_disentanglement: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    backward_flow: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lidar_init: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_every: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthDto {
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    height: Option<usize>,
}

macro_rules! merge {
    ($dst:expr, $src:expr, { $($field:ident),+ $(,)? }) => {
        $(if let Some(v) = $src.$field { $dst.$field = v; })+
    };
}

fn apply_dto(dto: RunConfigDto, mut cfg: RunConfig) -> RunConfig {
    if let Some(seed) = dto.seed {
        cfg.fit.seed = seed;
    }
    if let Some(s) = dto.sigma_aux {
        cfg.fit.sigma_aux = s;
    }
    if let Some(s) = dto.sigma_cue {
        cfg.sigma_cue = s;
    }
    if let Some(g) = dto.grid {
        merge!(cfg.grid, g, { dims, origin, voxel_size });
    }
    if let Some(r) = dto.render {
        merge!(cfg.render, r, { xi, n_samples, weight_threshold, sample_skip });
    }
    if let Some(w) = dto.weights {
        merge!(cfg.weights, w, {
            lambda_flow, lambda_range, lambda_eik, lambda_hess, lambda_smooth,
            lambda_dreg, thre, lambda_si, alpha_pm, theta_d,
        });
    }
    if let Some(f) = dto.fit {
        merge!(cfg.fit, f, {
            total_iters, stage1_fraction, n_tiles, n_lidar, lr, flow_lr_scale,
            weight_decay, warmup, beta1, beta2, eps, two_stage,
            dynamic_disentanglement, backward_flow, lidar_init, log_every,
        });
    }
    if let Some(s) = dto.synth {
        if let Some(w) = s.width {
            cfg.synth_width = w;
        }
        if let Some(h) = s.height {
            cfg.synth_height = h;
        }
    }
    cfg
}

fn to_dto(cfg: &RunConfig) -> RunConfigDto {
    RunConfigDto {
        seed: Some(cfg.fit.seed),
        sigma_aux: Some(cfg.fit.sigma_aux),
        sigma_cue: Some(cfg.sigma_cue),
        grid: Some(GridDto {
            dims: Some(cfg.grid.dims),
            origin: Some(cfg.grid.origin),
            voxel_size: Some(cfg.grid.voxel_size),
        }),
        render: Some(RenderDto {
            xi: Some(cfg.render.xi),
            n_samples: Some(cfg.render.n_samples),
            weight_threshold: Some(cfg.render.weight_threshold),
            sample_skip: Some(cfg.render.sample_skip),
        }),
        weights: Some(WeightsDto {
            lambda_flow: Some(cfg.weights.lambda_flow),
            lambda_range: Some(cfg.weights.lambda_range),
            lambda_eik: Some(cfg.weights.lambda_eik),
            lambda_hess: Some(cfg.weights.lambda_hess),
            lambda_smooth: Some(cfg.weights.lambda_smooth),
            lambda_dreg: Some(cfg.weights.lambda_dreg),
            thre: Some(cfg.weights.thre),
            lambda_si: Some(cfg.weights.lambda_si),
            alpha_pm: Some(cfg.weights.alpha_pm),
            theta_d: Some(cfg.weights.theta_d),
        }),
        fit: Some(FitDto {
            total_iters: Some(cfg.fit.total_iters),
            stage1_fraction: Some(cfg.fit.stage1_fraction),
            n_tiles: Some(cfg.fit.n_tiles),
            n_lidar: Some(cfg.fit.n_lidar),
            lr: Some(cfg.fit.lr),
            flow_lr_scale: Some(cfg.fit.flow_lr_scale),
            weight_decay: Some(cfg.fit.weight_decay),
            warmup: Some(cfg.fit.warmup),
            beta1: Some(cfg.fit.beta1),
            beta2: Some(cfg.fit.beta2),
            eps: Some(cfg.fit.eps),
            two_stage: Some(cfg.fit.two_stage),
            dynamic_disentanglement: Some(cfg.fit.dynamic_disentanglement),
            backward_flow: Some(cfg.fit.backward_flow),
            lidar_init: Some(cfg.fit.lidar_init),
            log_every: Some(cfg.fit.log_every),
        }),
        synth: Some(SynthDto {
            width: Some(cfg.synth_width),
            height: Some(cfg.synth_height),
        }),
    }
}

/// Loads a config file on top of [`RunConfig::default`]; omitted keys keep
/// their defaults, unknown keys are an error.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("`{}`: {e}", ps(path))))?;
    let dto: RunConfigDto =
        toml::from_str(&text).map_err(|e| Error::Config(format!("`{}`: {e}", ps(path))))?;
    let cfg = apply_dto(dto, RunConfig::default());
    cfg.validate()?;
    Ok(cfg)
}

/// Writes every field explicitly so a saved config pins the full run recipe.
pub fn save_run_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string_pretty(&to_dto(cfg))
        .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
    write_bytes(path, text.as_bytes())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub delta_t: f64,
    /// Reference frame index used by `fit`.
    pub t_ref: usize,
    /// Per-frame ego-to-world transforms, one 4x4 per frame.
    pub poses: String,
    /// Per-camera camera-to-ego transforms, one 4x4 per camera.
    pub extrinsics: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lidar_origin: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthPaths>,
    #[serde(rename = "camera")]
    pub cameras: Vec<CameraEntry>,
    #[serde(rename = "frame")]
    pub frames: Vec<FrameEntry>,
}

/// Voxelized oracle grids, present only in synthetic workspaces.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthPaths {
    pub sdf: String,
    pub flow: String,
    pub movable: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lidar: Option<String>,
    #[serde(rename = "view")]
    pub views: Vec<ViewEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub image: String,
    pub movable: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cue_forward: Option<String>,
    /// Backward cues keyed by target frame index (decimal string).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub cue_backward: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_flow: Option<String>,
}

impl Manifest {
    /// Every asset path the manifest references, in a stable order.
    fn referenced_files(&self) -> Vec<&str> {
        let mut out: Vec<&str> = vec![&self.poses, &self.extrinsics];
        if let Some(c) = &self.config {
            out.push(c);
        }
        if let Some(t) = &self.truth {
            out.extend([t.sdf.as_str(), t.flow.as_str(), t.movable.as_str()]);
        }
        for f in &self.frames {
            if let Some(l) = &f.lidar {
                out.push(l);
            }
            for v in &f.views {
                out.push(&v.image);
                out.push(&v.movable);
                out.extend(v.cue_forward.as_deref());
                out.extend(v.cue_backward.values().map(String::as_str));
                out.extend(v.gt_depth.as_deref());
                out.extend(v.gt_flow.as_deref());
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Manifest(format!(
                "unsupported version {}, expected 1",
                self.version
            )));
        }
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return Err(Error::Manifest(format!(
                "delta_t must be positive, got {}",
                self.delta_t
            )));
        }
        if self.cameras.is_empty() {
            return Err(Error::Manifest("no cameras declared".into()));
        }
        if self.frames.len() < 2 {
            return Err(Error::Manifest(format!(
                "need at least 2 frames, got {}",
                self.frames.len()
            )));
        }
        if self.t_ref + 1 >= self.frames.len() {
            return Err(Error::Manifest(format!(
                "t_ref {} needs a successor among {} frames",
                self.t_ref,
                self.frames.len()
            )));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.views.len() != self.cameras.len() {
                return Err(Error::Manifest(format!(
                    "frame {t} has {} views but {} cameras are declared",
                    frame.views.len(),
                    self.cameras.len()
                )));
            }
            for (c, view) in frame.views.iter().enumerate() {
                for key in view.cue_backward.keys() {
                    let ta: usize = key.parse().map_err(|_| {
                        Error::Manifest(format!(
                            "frame {t} view {c}: backward cue key `{key}` is not a frame index"
                        ))
                    })?;
                    if ta >= t {
                        return Err(Error::Manifest(format!(
                            "frame {t} view {c}: backward cue target {ta} is not earlier"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Workspace
// ---------------------------------------------------------------------------

/// A loaded workspace: root directory plus its parsed manifest. Asset
/// accessors resolve paths relative to the root.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Workspace {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// The run config stored in the workspace, if the manifest names one.
    pub fn run_config(&self) -> Result<Option<RunConfig>> {
        match &self.manifest.config {
            Some(rel) => Ok(Some(load_run_config(&self.path(rel))?)),
            None => Ok(None),
        }
    }

    /// Voxelized oracle grids, if present. `xi` sets the occupancy mapping
    /// sharpness when binarizing the stored SDF.
    pub fn truth(&self, xi: f64) -> Result<Option<GroundTruth>> {
        let Some(paths) = &self.manifest.truth else {
            return Ok(None);
        };
        let sdf = load_scalar_grid(&self.path(&paths.sdf))?;
        let flow = load_vector_grid(&self.path(&paths.flow))?;
        let movable_grid = load_scalar_grid(&self.path(&paths.movable))?;
        for (name, spec) in [(&paths.flow, &flow.spec), (&paths.movable, &movable_grid.spec)] {
            if *spec != sdf.spec {
                return Err(Error::DimensionMismatch(format!(
                    "truth grid `{name}` does not match `{}`",
                    paths.sdf
                )));
            }
        }
        let movable = movable_grid.data.iter().map(|&v| v > 0.5).collect();
        let occupancy = sdf_to_occupancy(&sdf, xi);
        Ok(Some(GroundTruth {
            sdf,
            flow,
            movable,
            occupancy,
        }))
    }
}

fn view_dir(frame: usize, cam: usize) -> String {
    format!("frames/{frame:03}/cam{cam}")
}

/// Writes a frame set (plus optional oracle grids and run config) as a fresh
/// workspace under `root`. Existing files are overwritten.
pub fn save_workspace(
    root: &Path,
    fs_data: &FrameSet,
    t_ref: usize,
    truth: Option<&GroundTruth>,
    config: Option<&RunConfig>,
) -> Result<Workspace> {
    fs_data.validate()?;
    fs::create_dir_all(root)?;

    let poses: Vec<RigidTransform> = fs_data.frames.iter().map(|f| f.ego_to_world).collect();
    save_transforms(&root.join("poses.txt"), &poses)?;
    let extr: Vec<RigidTransform> = fs_data.cameras.iter().map(|c| c.cam_to_ego).collect();
    save_transforms(&root.join("cameras.txt"), &extr)?;

    let cameras = fs_data
        .cameras
        .iter()
        .map(|c| CameraEntry {
            fx: c.intrinsics.fx,
            fy: c.intrinsics.fy,
            cx: c.intrinsics.cx,
            cy: c.intrinsics.cy,
            width: c.intrinsics.width,
            height: c.intrinsics.height,
        })
        .collect();

    let mut frames = Vec::with_capacity(fs_data.frames.len());
    for (t, frame) in fs_data.frames.iter().enumerate() {
        let mut views = Vec::with_capacity(frame.images.len());
        for c in 0..frame.images.len() {
            let dir = view_dir(t, c);
            fs::create_dir_all(root.join(&dir))?;
            let rel = |name: &str| format!("{dir}/{name}");

            let image = rel("image.ppm");
            save_image_ppm(&root.join(&image), &frame.images[c])?;
            let movable = rel("movable.pgm");
            save_mask_pgm(&root.join(&movable), &frame.movable[c])?;

            let cue_forward = match &frame.cue_forward[c] {
                Some(map) => {
                    let p = rel("cue_fwd.flo");
                    save_flow_flo(&root.join(&p), map)?;
                    Some(p)
                }
                None => None,
            };
            let mut cue_backward = BTreeMap::new();
            for (&ta, map) in &frame.cue_backward[c] {
                let p = rel(&format!("cue_bwd_{ta:03}.flo"));
                save_flow_flo(&root.join(&p), map)?;
                cue_backward.insert(ta.to_string(), p);
            }
            let gt_depth = match &frame.gt_depth[c] {
                Some(map) => {
                    let p = rel("gt_depth.pfm");
                    save_scalar_pfm(&root.join(&p), map)?;
                    Some(p)
                }
                None => None,
            };
            let gt_flow = match &frame.gt_flow[c] {
                Some(map) => {
                    let p = rel("gt_flow.flo");
                    save_flow_flo(&root.join(&p), map)?;
                    Some(p)
                }
                None => None,
            };
            views.push(ViewEntry {
                image,
                movable,
                cue_forward,
                cue_backward,
                gt_depth,
                gt_flow,
            });
        }
        let lidar = if frame.lidar.is_empty() {
            None
        } else {
            let p = format!("frames/{t:03}/lidar.txt");
            save_points(&root.join(&p), &frame.lidar)?;
            Some(p)
        };
        frames.push(FrameEntry { lidar, views });
    }

    let truth_paths = match truth {
        Some(gt) => {
            fs::create_dir_all(root.join("truth"))?;
            let paths = TruthPaths {
                sdf: "truth/sdf.grid".into(),
                flow: "truth/flow.grid".into(),
                movable: "truth/movable.grid".into(),
            };
            save_scalar_grid(&root.join(&paths.sdf), &gt.sdf)?;
            save_vector_grid(&root.join(&paths.flow), &gt.flow)?;
            let movable = ScalarField {
                spec: gt.sdf.spec.clone(),
                data: gt.movable.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            };
            save_scalar_grid(&root.join(&paths.movable), &movable)?;
            Some(paths)
        }
        None => None,
    };

    let config_rel = match config {
        Some(cfg) => {
            save_run_config(&root.join("config.toml"), cfg)?;
            Some("config.toml".to_string())
        }
        None => None,
    };

    let manifest = Manifest {
        version: 1,
        delta_t: fs_data.delta_t,
        t_ref,
        poses: "poses.txt".into(),
        extrinsics: "cameras.txt".into(),
        config: config_rel,
        lidar_origin: fs_data.lidar_origin.map(|o| [o.x, o.y, o.z]),
        truth: truth_paths,
        cameras,
        frames,
    };
    manifest.validate()?;
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Manifest(format!("serialize manifest: {e}")))?;
    write_bytes(&root.join("manifest.toml"), text.as_bytes())?;
    Ok(Workspace {
        root: root.to_path_buf(),
        manifest,
    })
}

/// Loads and fully materializes a workspace. All structural invariants are
/// checked eagerly; the first violation is returned as an error naming the
/// offending file.
pub fn load_workspace(root: &Path) -> Result<(Workspace, FrameSet)> {
    let manifest_path = root.join("manifest.toml");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Manifest(format!("`{}`: {e}", ps(&manifest_path))))?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| Error::Manifest(format!("`{}`: {e}", ps(&manifest_path))))?;
    manifest.validate()?;

    for rel in manifest.referenced_files() {
        if !root.join(rel).is_file() {
            return Err(Error::Manifest(format!("references missing file `{rel}`")));
        }
    }

    let poses = load_transforms(&root.join(&manifest.poses))?;
    if poses.len() != manifest.frames.len() {
        return Err(Error::Manifest(format!(
            "`{}` has {} matrices but the manifest declares {} frames",
            manifest.poses,
            poses.len(),
            manifest.frames.len()
        )));
    }
    let extr = load_transforms(&root.join(&manifest.extrinsics))?;
    if extr.len() != manifest.cameras.len() {
        return Err(Error::Manifest(format!(
            "`{}` has {} matrices but the manifest declares {} cameras",
            manifest.extrinsics,
            extr.len(),
            manifest.cameras.len()
        )));
    }

    let mut cameras = Vec::with_capacity(manifest.cameras.len());
    for (entry, cam_to_ego) in manifest.cameras.iter().zip(&extr) {
        let intrinsics = Intrinsics::new(
            entry.fx,
            entry.fy,
            entry.cx,
            entry.cy,
            entry.width,
            entry.height,
        )?;
        cameras.push(Camera {
            intrinsics,
            cam_to_ego: *cam_to_ego,
        });
    }

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (t, entry) in manifest.frames.iter().enumerate() {
        let mut images = Vec::new();
        let mut movable = Vec::new();
        let mut cue_forward = Vec::new();
        let mut cue_backward = Vec::new();
        let mut gt_depth = Vec::new();
        let mut gt_flow = Vec::new();
        for (c, view) in entry.views.iter().enumerate() {
            let want = (cameras[c].intrinsics.width, cameras[c].intrinsics.height);
            let check = |rel: &str, got: (usize, usize)| -> Result<()> {
                if got != want {
                    return Err(Error::DimensionMismatch(format!(
                        "`{rel}` is {}x{} but camera {c} is {}x{}",
                        got.0, got.1, want.0, want.1
                    )));
                }
                Ok(())
            };

            let img = load_image_ppm(&root.join(&view.image))?;
            check(&view.image, (img.width, img.height))?;
            images.push(img);

            let mask = load_mask_pgm(&root.join(&view.movable))?;
            check(&view.movable, (mask.width, mask.height))?;
            movable.push(mask);

            cue_forward.push(match &view.cue_forward {
                Some(rel) => {
                    let map = load_flow_flo(&root.join(rel))?;
                    check(rel, (map.width, map.height))?;
                    Some(map)
                }
                None => None,
            });

            let mut bwd = BTreeMap::new();
            for (key, rel) in &view.cue_backward {
                let ta: usize = key.parse().expect("validated above");
                let map = load_flow_flo(&root.join(rel))?;
                check(rel, (map.width, map.height))?;
                bwd.insert(ta, map);
            }
            cue_backward.push(bwd);

            gt_depth.push(match &view.gt_depth {
                Some(rel) => {
                    let map = load_scalar_pfm(&root.join(rel))?;
                    check(rel, (map.width, map.height))?;
                    Some(map)
                }
                None => None,
            });
            gt_flow.push(match &view.gt_flow {
                Some(rel) => {
                    let map = load_flow_flo(&root.join(rel))?;
                    check(rel, (map.width, map.height))?;
                    Some(map)
                }
                None => None,
            });
        }
        let lidar = match &entry.lidar {
            Some(rel) => load_points(&root.join(rel))?,
            None => Vec::new(),
        };
        frames.push(FrameData {
            ego_to_world: poses[t],
            images,
            movable,
            cue_forward,
            cue_backward,
            gt_depth,
            gt_flow,
            lidar,
        });
    }

    let fs_data = FrameSet {
        cameras,
        frames,
        delta_t: manifest.delta_t,
        lidar_origin: manifest.lidar_origin.map(Vector3::from),
    };
    fs_data.validate()?;
    Ok((
        Workspace {
            root: root.to_path_buf(),
            manifest,
        },
        fs_data,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_frameset, shrink_scene, standard_scene, voxelize};
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    static DIR_SEQ: AtomicUsize = AtomicUsize::new(0);

    /// Fresh scratch directory under the system temp dir.
    fn scratch() -> PathBuf {
        let n = DIR_SEQ.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("occflow-io-{}-{n}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    /// Random value that is exactly representable in f32.
    fn f32_val(rng: &mut ChaCha8Rng) -> f64 {
        rng.gen_range(-100.0f32..100.0f32) as f64
    }

    fn tiny_scene() -> crate::synth::Scene {
        let mut scene = standard_scene(7);
        shrink_scene(&mut scene, 48, 36);
        scene.n_frames = 3;
        scene.t_ref = 1;
        scene
    }

    #[test]
    fn grid_round_trip_is_bit_exact() {
        let dir = scratch();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = GridSpec {
            dims: [5, 4, 3],
            origin: [-1.0, 0.25, 3.5],
            voxel_size: [0.2, 0.2, 0.2],
        };
        let sdf = ScalarField {
            spec: spec.clone(),
            data: (0..spec.n_voxels()).map(|_| f32_val(&mut rng)).collect(),
        };
        let path = dir.join("sdf.grid");
        save_scalar_grid(&path, &sdf).unwrap();
        let back = load_scalar_grid(&path).unwrap();
        assert_eq!(back.spec, spec);
        assert!(back.data.iter().map(|v| v.to_bits()).eq(sdf.data.iter().map(|v| v.to_bits())));

        let flow = VectorField {
            spec: spec.clone(),
            data: (0..spec.n_voxels() * 2).map(|_| f32_val(&mut rng)).collect(),
        };
        let path = dir.join("flow.grid");
        save_vector_grid(&path, &flow).unwrap();
        let back = load_vector_grid(&path).unwrap();
        assert_eq!(back.spec, spec);
        assert!(back.data.iter().map(|v| v.to_bits()).eq(flow.data.iter().map(|v| v.to_bits())));

        // A two-channel file is not a scalar field.
        assert!(matches!(
            load_scalar_grid(&dir.join("flow.grid")),
            Err(Error::Codec { .. })
        ));
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn any_grid_shape_round_trips(h in 1usize..5, w in 1usize..5, z in 1usize..4, seed in 0u64..1000) {
            let dir = scratch();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = GridSpec {
                dims: [h, w, z],
                origin: [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), 0.0],
                voxel_size: [0.1, 0.25, 0.5],
            };
            let field = ScalarField {
                spec: spec.clone(),
                data: (0..spec.n_voxels()).map(|_| f32_val(&mut rng)).collect(),
            };
            let path = dir.join("g.grid");
            save_scalar_grid(&path, &field).unwrap();
            let back = load_scalar_grid(&path).unwrap();
            prop_assert_eq!(back.spec, spec);
            prop_assert!(back.data.iter().map(|v| v.to_bits()).eq(field.data.iter().map(|v| v.to_bits())));
        }
    }

    #[test]
    fn malformed_grid_headers_are_rejected_with_the_path() {
        let dir = scratch();
        let spec = GridSpec {
            dims: [2, 2, 2],
            origin: [0.0; 3],
            voxel_size: [1.0; 3],
        };
        let field = ScalarField::new_filled(spec, 1.0);
        let path = dir.join("g.grid");
        save_scalar_grid(&path, &field).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        let err = load_scalar_grid(&path).unwrap_err();
        assert!(err.to_string().contains("g.grid"), "{err}");

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        fs::write(&path, &bad_version).unwrap();
        assert!(load_scalar_grid(&path).is_err());

        fs::write(&path, &good[..good.len() - 1]).unwrap();
        assert!(load_scalar_grid(&path).is_err());

        let mut zero_dim = good.clone();
        zero_dim[8..12].fill(0);
        fs::write(&path, &zero_dim).unwrap();
        assert!(load_scalar_grid(&path).is_err());
    }

    #[test]
    fn ppm_round_trip_preserves_quantized_pixels() {
        let dir = scratch();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = ImageRgb::new(7, 5);
        for v in &mut img.data {
            *v = rng.gen_range(0u8..=255) as f64 / 255.0;
        }
        // Out-of-range values clamp on save.
        img.data[0] = 1.7;
        img.data[1] = -0.3;
        let path = dir.join("img.ppm");
        save_image_ppm(&path, &img).unwrap();
        let back = load_image_ppm(&path).unwrap();
        assert_eq!((back.width, back.height), (7, 5));
        assert_eq!(back.data[0], 1.0);
        assert_eq!(back.data[1], 0.0);
        assert_eq!(&back.data[2..], &img.data[2..]);

        // Second generation is idempotent: quantization happened once.
        let path2 = dir.join("img2.ppm");
        save_image_ppm(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn ppm_headers_with_comments_parse() {
        let dir = scratch();
        let path = dir.join("c.ppm");
        let mut bytes = b"P6 # comment\n# another\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 0, 0, 255, 128, 7]);
        fs::write(&path, &bytes).unwrap();
        let img = load_image_ppm(&path).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixel(1, 0), [1.0, 128.0 / 255.0, 7.0 / 255.0]);

        // Wrong maxval is rejected.
        fs::write(&path, b"P6\n2 1\n65535\n____________").unwrap();
        assert!(load_image_ppm(&path).is_err());
    }

    #[test]
    fn pgm_round_trip_is_exact() {
        let dir = scratch();
        let mut mask = MaskMap::new(9, 4);
        for (i, b) in mask.data.iter_mut().enumerate() {
            *b = i % 3 == 0;
        }
        let path = dir.join("m.pgm");
        save_mask_pgm(&path, &mask).unwrap();
        assert_eq!(load_mask_pgm(&path).unwrap(), mask);
    }

    #[test]
    fn pfm_round_trip_is_bit_exact_and_bottom_up() {
        let dir = scratch();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut map = ScalarMap::new(6, 3);
        for v in &mut map.data {
            *v = f32_val(&mut rng);
        }
        map.set(2, 1, f64::INFINITY);
        let path = dir.join("d.pfm");
        save_scalar_pfm(&path, &map).unwrap();
        let back = load_scalar_pfm(&path).unwrap();
        assert_eq!(back, map);

        // The first payload row is the bottom image row.
        let bytes = fs::read(&path).unwrap();
        let off = bytes.len() - 6 * 3 * 4;
        let first = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        assert_eq!(first as f64, map.get(0, 2));
    }

    #[test]
    fn positive_scale_pfm_reads_as_big_endian() {
        let dir = scratch();
        let path = dir.join("be.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        for v in [1.5f32, -2.25] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        let map = load_scalar_pfm(&path).unwrap();
        assert_eq!(map.get(0, 0), 1.5);
        assert_eq!(map.get(1, 0), -2.25);
    }

    #[test]
    fn flo_round_trip_is_bit_exact() {
        let dir = scratch();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut flow = FlowMap::new(4, 6);
        for v in &mut flow.data {
            *v = f32_val(&mut rng);
        }
        let path = dir.join("f.flo");
        save_flow_flo(&path, &flow).unwrap();
        assert_eq!(load_flow_flo(&path).unwrap(), flow);

        // Header layout: magic, then little-endian width and height.
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
        assert_eq!(i32::from_le_bytes(bytes[8..12].try_into().unwrap()), 6);

        let mut bad = bytes.clone();
        bad[0] = b'Q';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_flow_flo(&path), Err(Error::Codec { .. })));
    }

    #[test]
    fn transform_files_round_trip_exactly() {
        let dir = scratch();
        let ts = vec![
            RigidTransform::identity(),
            RigidTransform::from_yaw(0.3, Vector3::new(1.5, -2.0, 0.25)),
            RigidTransform::from_yaw(-1.2, Vector3::new(0.1, 0.2, 0.3)),
        ];
        let path = dir.join("poses.txt");
        save_transforms(&path, &ts).unwrap();
        let back = load_transforms(&path).unwrap();
        assert_eq!(back.len(), ts.len());
        for (a, b) in ts.iter().zip(&back) {
            assert_eq!(a.rotation, b.rotation);
            assert_eq!(a.translation, b.translation);
        }
    }

    #[test]
    fn non_rigid_pose_matrices_are_rejected() {
        let dir = scratch();
        let path = dir.join("poses.txt");
        // Scale 2 in the rotation block.
        fs::write(&path, "2 0 0 0\n0 2 0 0\n0 0 2 0\n0 0 0 1\n").unwrap();
        assert!(load_transforms(&path).is_err());
        // Bad bottom row.
        fs::write(&path, "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 2\n").unwrap();
        assert!(load_transforms(&path).is_err());
        // Token count not a multiple of 16.
        fs::write(&path, "1 0 0\n").unwrap();
        assert!(load_transforms(&path).is_err());
    }

    #[test]
    fn point_and_metric_files_round_trip() {
        let dir = scratch();
        let pts = vec![
            Vector3::new(1.25, -3.5, 0.125),
            Vector3::new(0.1, 0.2, 0.3),
        ];
        let path = dir.join("lidar.txt");
        save_points(&path, &pts).unwrap();
        assert_eq!(load_points(&path).unwrap(), pts);
        save_points(&path, &[]).unwrap();
        assert!(load_points(&path).unwrap().is_empty());

        let metrics = vec![("abs_rel".to_string(), 0.034), ("rayiou".to_string(), 0.81)];
        let mpath = dir.join("metrics.txt");
        save_metrics_file(&mpath, &metrics).unwrap();
        assert_eq!(load_metrics_file(&mpath).unwrap(), metrics);
    }

    #[test]
    fn run_config_round_trips_through_toml() {
        let dir = scratch();
        let mut cfg = RunConfig::synthetic();
        cfg.fit.seed = 99;
        cfg.fit.total_iters = 123;
        cfg.weights.lambda_eik = 0.37;
        cfg.render.xi = 12.5;
        cfg.sigma_cue = 0.25;
        cfg.synth_width = 64;
        let path = dir.join("config.toml");
        save_run_config(&path, &cfg).unwrap();
        let back = load_run_config(&path).unwrap();
        assert_eq!(back.fit, cfg.fit);
        assert_eq!(back.grid, cfg.grid);
        assert_eq!(back.weights.lambda_eik, 0.37);
        assert_eq!(back.render.xi, 12.5);
        assert_eq!(back.sigma_cue, 0.25);
        assert_eq!(back.synth_width, 64);
        assert_eq!(back.synth_height, cfg.synth_height);
    }

    #[test]
    fn partial_config_overrides_only_named_keys() {
        let dir = scratch();
        let path = dir.join("config.toml");
        fs::write(&path, "seed = 5\n\n[fit]\nlr = 0.5\n").unwrap();
        let cfg = load_run_config(&path).unwrap();
        let base = RunConfig::default();
        assert_eq!(cfg.fit.seed, 5);
        assert_eq!(cfg.fit.lr, 0.5);
        assert_eq!(cfg.fit.total_iters, base.fit.total_iters);
        assert_eq!(cfg.fit.weight_decay, base.fit.weight_decay);
        assert_eq!(cfg.grid, base.grid);
    }

    #[test]
    fn unknown_or_invalid_config_keys_are_rejected() {
        let dir = scratch();
        let path = dir.join("config.toml");
        fs::write(&path, "[fit]\nlrr = 0.5\n").unwrap();
        let err = load_run_config(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("lrr"), "{err}");

        fs::write(&path, "bogus = 1\n").unwrap();
        assert!(load_run_config(&path).is_err());

        // Well-formed TOML with an invalid value still fails validation.
        fs::write(&path, "[fit]\nlr = 0.0\n").unwrap();
        assert!(load_run_config(&path).is_err());
    }

    #[test]
    fn synthetic_workspace_round_trips() {
        let dir = scratch();
        let scene = tiny_scene();
        let fs_data = build_frameset(&scene);
        let truth = voxelize(&scene, 50.0);
        let mut cfg = RunConfig::synthetic();
        cfg.grid = scene.spec.clone();
        cfg.synth_width = 48;
        cfg.synth_height = 36;

        let root = dir.join("ws");
        save_workspace(&root, &fs_data, scene.t_ref, Some(&truth), Some(&cfg)).unwrap();
        let (ws, loaded) = load_workspace(&root).unwrap();

        assert_eq!(ws.manifest.t_ref, 1);
        assert_eq!(loaded.cameras.len(), fs_data.cameras.len());
        assert_eq!(loaded.frames.len(), fs_data.frames.len());
        assert_eq!(loaded.delta_t, fs_data.delta_t);
        assert_eq!(loaded.lidar_origin, fs_data.lidar_origin);

        // Poses and extrinsics survive the decimal text exactly.
        for (a, b) in fs_data.frames.iter().zip(&loaded.frames) {
            assert_eq!(a.ego_to_world.rotation, b.ego_to_world.rotation);
            assert_eq!(a.ego_to_world.translation, b.ego_to_world.translation);
        }
        for (a, b) in fs_data.cameras.iter().zip(&loaded.cameras) {
            assert_eq!(a.intrinsics, b.intrinsics);
            assert_eq!(a.cam_to_ego.rotation, b.cam_to_ego.rotation);
        }

        // Masks are exact; float maps come back f32-truncated; lidar exact.
        for (a, b) in fs_data.frames.iter().zip(&loaded.frames) {
            assert_eq!(a.movable, b.movable);
            assert_eq!(a.lidar, b.lidar);
            for (ca, cb) in a.cue_forward.iter().zip(&b.cue_forward) {
                match (ca, cb) {
                    (Some(ma), Some(mb)) => {
                        assert!(ma
                            .data
                            .iter()
                            .zip(&mb.data)
                            .all(|(x, y)| (*x as f32) as f64 == *y));
                    }
                    (None, None) => {}
                    _ => panic!("cue presence changed"),
                }
            }
            assert_eq!(
                a.cue_backward.iter().map(|m| m.len()).sum::<usize>(),
                b.cue_backward.iter().map(|m| m.len()).sum::<usize>()
            );
        }

        // Truth grids reload with the movable mask intact.
        let gt = ws.truth(50.0).unwrap().unwrap();
        assert_eq!(gt.movable, truth.movable);
        assert_eq!(gt.sdf.spec, truth.sdf.spec);
        assert!(gt
            .sdf
            .data
            .iter()
            .zip(&truth.sdf.data)
            .all(|(x, y)| *x == (*y as f32) as f64));

        // Stored config reloads and still validates.
        let cfg2 = ws.run_config().unwrap().unwrap();
        assert_eq!(cfg2.grid, scene.spec);
        assert_eq!(cfg2.synth_width, 48);

        // Second generation: saving the loaded set reproduces every asset
        // byte for byte (quantization is idempotent).
        let root2 = dir.join("ws2");
        save_workspace(&root2, &loaded, ws.manifest.t_ref, None, None).unwrap();
        for rel in [
            "poses.txt",
            "cameras.txt",
            "frames/000/cam0/image.ppm",
            "frames/001/cam2/cue_fwd.flo",
            "frames/002/cam1/movable.pgm",
            "frames/001/cam0/gt_depth.pfm",
        ] {
            assert_eq!(
                fs::read(root.join(rel)).unwrap(),
                fs::read(root2.join(rel)).unwrap(),
                "{rel} differs"
            );
        }
    }

    #[test]
    fn missing_referenced_file_is_a_manifest_error() {
        let dir = scratch();
        let scene = tiny_scene();
        let fs_data = build_frameset(&scene);
        let root = dir.join("ws");
        save_workspace(&root, &fs_data, 1, None, None).unwrap();
        let victim = "frames/001/cam1/image.ppm";
        fs::remove_file(root.join(victim)).unwrap();
        let err = load_workspace(&root).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)), "{err}");
        assert!(err.to_string().contains(victim), "{err}");
    }

    #[test]
    fn dimension_mismatch_names_the_file() {
        let dir = scratch();
        let scene = tiny_scene();
        let fs_data = build_frameset(&scene);
        let root = dir.join("ws");
        save_workspace(&root, &fs_data, 1, None, None).unwrap();
        let victim = "frames/000/cam0/movable.pgm";
        save_mask_pgm(&root.join(victim), &MaskMap::new(4, 4)).unwrap();
        let err = load_workspace(&root).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)), "{err}");
        assert!(err.to_string().contains(victim), "{err}");
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = scratch();
        let scene = tiny_scene();
        let fs_data = build_frameset(&scene);
        let root = dir.join("ws");
        save_workspace(&root, &fs_data, 1, None, None).unwrap();
        let mpath = root.join("manifest.toml");
        let mut text = fs::read_to_string(&mpath).unwrap();
        text.insert_str(0, "bogus_key = 1\n");
        fs::write(&mpath, text).unwrap();
        let err = load_workspace(&root).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)), "{err}");
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn structural_manifest_violations_are_caught() {
        let dir = scratch();
        let scene = tiny_scene();
        let fs_data = build_frameset(&scene);
        let root = dir.join("ws");
        save_workspace(&root, &fs_data, 1, None, None).unwrap();
        let mpath = root.join("manifest.toml");
        let good = fs::read_to_string(&mpath).unwrap();

        // Reference frame without a successor.
        fs::write(&mpath, good.replace("t_ref = 1", "t_ref = 2")).unwrap();
        assert!(matches!(load_workspace(&root), Err(Error::Manifest(_))));

        // Unsupported version.
        fs::write(&mpath, good.replace("version = 1", "version = 3")).unwrap();
        assert!(matches!(load_workspace(&root), Err(Error::Manifest(_))));

        fs::write(&mpath, &good).unwrap();
        assert!(load_workspace(&root).is_ok());
    }
}
