//! Procedural test scenes with exact geometry: analytic SDFs, sphere-traced
//! reference views, optical-flow cues, LiDAR sweeps, and voxelized ground
//! truth. Everything is reproducible from a single seed.
//!
//! World coordinates equal frame-0 ego coordinates; the ego advances along +x
//! by a fixed step per frame. The reconstruction grid is anchored to the
//! reference frame's ego pose, so ground-truth grids are voxelized in that
//! frame.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Camera, FrameData, FrameSet, Intrinsics, Ray, RigidTransform};
use crate::grid::{sdf_to_occupancy, GridSpec, OccupancyGrid, ScalarField, VectorField};
use crate::maps::{FlowMap, ImageRgb, MaskMap, ScalarMap};

/// Analytic solid.
#[derive(Debug, Clone)]
pub enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    Cuboid { center: Vector3<f64>, half: Vector3<f64> },
    /// Half-space below `z`; fills the bottom of every view.
    Ground { z: f64 },
}

impl Shape {
    /// Exact signed distance with the shape displaced by `offset`.
    fn sdf(&self, p: &Vector3<f64>, offset: &Vector3<f64>) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - center - offset).norm() - radius,
            Shape::Cuboid { center, half } => {
                let q = (p - center - offset).abs() - half;
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0));
                outside.norm() + q.max().min(0.0)
            }
            Shape::Ground { z } => p.z - z,
        }
    }

    /// Texture coordinates move with the shape so appearance is attached to
    /// the surface, not to world space.
    fn local(&self, p: &Vector3<f64>, offset: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Shape::Sphere { center, .. } | Shape::Cuboid { center, .. } => p - center - offset,
            Shape::Ground { .. } => *p,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Primitive {
    pub shape: Shape,
    /// Horizontal displacement per frame interval, meters.
    pub velocity: Vector2<f64>,
    pub movable: bool,
    pub texture_seed: u64,
}

impl Primitive {
    fn offset_at(&self, frame: f64) -> Vector3<f64> {
        Vector3::new(self.velocity.x * frame, self.velocity.y * frame, 0.0)
    }
}

/// A full synthetic setup: geometry, rig, and sampling knobs.
#[derive(Debug, Clone)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    /// Reconstruction grid in reference-frame ego coordinates.
    pub spec: GridSpec,
    pub n_frames: usize,
    pub t_ref: usize,
    /// Seconds per frame interval.
    pub delta_t: f64,
    /// Ego forward motion per frame, meters.
    pub ego_step: f64,
    /// Camera yaw angles (radians); one camera per entry.
    pub cam_yaws: Vec<f64>,
    pub cam_pitch: f64,
    pub cam_height: f64,
    pub img_width: usize,
    pub img_height: usize,
    pub focal: f64,
    pub lidar_origin: Vector3<f64>,
    pub lidar_n_az: usize,
    pub lidar_n_el: usize,
    pub lidar_az_span: (f64, f64),
    pub lidar_el_span: (f64, f64),
    /// Standard deviation of the frozen noise on flow cues, pixels.
    pub cue_noise_px: f64,
    pub seed: u64,
}

impl Scene {
    pub fn ego_to_world(&self, frame: usize) -> RigidTransform {
        RigidTransform::from_translation(Vector3::new(self.ego_step * frame as f64, 0.0, 0.0))
    }

    /// Scene SDF at world point `p`, frame `frame`; also reports which
    /// primitive is closest (the union argmin).
    pub fn sdf_and_prim(&self, p: &Vector3<f64>, frame: f64) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, prim) in self.primitives.iter().enumerate() {
            let d = prim.shape.sdf(p, &prim.offset_at(frame));
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    pub fn sdf(&self, p: &Vector3<f64>, frame: f64) -> f64 {
        self.sdf_and_prim(p, frame).0
    }

    /// Per-frame displacement of the primitive owning `p` (zero for rigid
    /// background), lifted to 3d.
    pub fn flow_at(&self, p: &Vector3<f64>, frame: f64) -> Vector3<f64> {
        let (_, i) = self.sdf_and_prim(p, frame);
        let prim = &self.primitives[i];
        if prim.movable {
            Vector3::new(prim.velocity.x, prim.velocity.y, 0.0)
        } else {
            Vector3::zeros()
        }
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.cam_yaws
            .iter()
            .map(|&yaw| Camera {
                intrinsics: Intrinsics::new(
                    self.focal,
                    self.focal,
                    (self.img_width as f64 - 1.0) / 2.0,
                    (self.img_height as f64 - 1.0) / 2.0,
                    self.img_width,
                    self.img_height,
                )
                .unwrap(),
                cam_to_ego: RigidTransform::new(
                    camera_basis(yaw, self.cam_pitch),
                    Vector3::new(0.0, 0.0, self.cam_height),
                )
                .unwrap(),
            })
            .collect()
    }
}

/// Camera-to-ego rotation for a camera yawed by `yaw` (positive = left) and
/// pitched by `pitch` (positive = up), no roll. Columns are the camera's
/// right/down/forward axes in ego coordinates (ego: x forward, y left, z up).
pub fn camera_basis(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let right = Vector3::new(sy, -cy, 0.0);
    let down = Vector3::new(sp * cy, sp * sy, -cp);
    let forward = Vector3::new(cp * cy, cp * sy, sp);
    Matrix3::from_columns(&[right, down, forward])
}

/// Sphere tracing against the scene union. Returns the ray parameter of the
/// first surface point, or `None` beyond `t_max`.
pub fn sphere_trace(scene: &Scene, frame: f64, ray: &Ray, t_max: f64) -> Option<(f64, usize)> {
    let mut t = 1e-4;
    for _ in 0..512 {
        let p = ray.at(t);
        let (d, prim) = scene.sdf_and_prim(&p, frame);
        if d < 1e-6 {
            return Some((t, prim));
        }
        t += d;
        if t > t_max {
            return None;
        }
    }
    None
}

#[inline]
fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

#[inline]
fn hash01(seed: u64, i: i64, j: i64, k: i64) -> f64 {
    let h = mix64(
        seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15)
            ^ (j as u64).wrapping_mul(0xc2b2ae3d27d4eb4f)
            ^ (k as u64).wrapping_mul(0x165667b19e3779f9),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinearly interpolated lattice noise in [0, 1].
fn value_noise(seed: u64, p: &Vector3<f64>, freq: f64) -> f64 {
    let q = p * freq;
    let base = [q.x.floor(), q.y.floor(), q.z.floor()];
    let f = [q.x - base[0], q.y - base[1], q.z - base[2]];
    let (bi, bj, bk) = (base[0] as i64, base[1] as i64, base[2] as i64);
    let mut acc = 0.0;
    for c in 0..8 {
        let (di, dj, dk) = ((c & 1) as i64, ((c >> 1) & 1) as i64, ((c >> 2) & 1) as i64);
        let w = (if di == 1 { f[0] } else { 1.0 - f[0] })
            * (if dj == 1 { f[1] } else { 1.0 - f[1] })
            * (if dk == 1 { f[2] } else { 1.0 - f[2] });
        acc += w * hash01(seed, bi + di, bj + dj, bk + dk);
    }
    acc
}

/// View-independent surface color, three octaves of value noise in the
/// primitive's local frame. Range stays inside [0.15, 0.85] so photometric
/// losses keep contrast without clipping.
pub fn texture(seed: u64, p_local: &Vector3<f64>) -> [f64; 3] {
    let mut rgb = [0.0; 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        let s = seed.wrapping_add(0x51ed_270b * ch as u64 + 1);
        let v = 0.5 * value_noise(s, p_local, 1.5)
            + 0.3 * value_noise(s ^ 0xabcdef, p_local, 3.0)
            + 0.2 * value_noise(s ^ 0x123456, p_local, 6.0);
        *out = 0.15 + 0.7 * v;
    }
    rgb
}

/// Voxelized ground truth in reference-frame ego coordinates.
pub struct GroundTruth {
    pub sdf: ScalarField,
    /// Horizontal displacement per frame interval, meters.
    pub flow: VectorField,
    /// Occupied and owned by a movable primitive.
    pub movable: Vec<bool>,
    pub occupancy: OccupancyGrid,
}

/// Samples the analytic scene at voxel centers for the reference frame.
pub fn voxelize(scene: &Scene, xi: f64) -> GroundTruth {
    let spec = scene.spec.clone();
    let to_world = scene.ego_to_world(scene.t_ref);
    let frame = scene.t_ref as f64;
    let n = spec.n_voxels();
    let mut sdf = ScalarField::new_filled(spec.clone(), 0.0);
    let mut flow = VectorField::new_zero(spec.clone());
    let mut movable = vec![false; n];
    let [h, w, z] = spec.dims;
    for i in 0..h {
        for j in 0..w {
            for k in 0..z {
                let idx = spec.index(i, j, k);
                let p = to_world.transform_point(&spec.voxel_center(i, j, k));
                let (d, pi) = scene.sdf_and_prim(&p, frame);
                sdf.data[idx] = d;
                let prim = &scene.primitives[pi];
                if prim.movable {
                    flow.data[idx * 2] = prim.velocity.x;
                    flow.data[idx * 2 + 1] = prim.velocity.y;
                    movable[idx] = d <= 0.0;
                }
            }
        }
    }
    let occupancy = sdf_to_occupancy(&sdf, xi);
    GroundTruth {
        sdf,
        flow,
        movable,
        occupancy,
    }
}

/// Per-pixel trace cache for one (frame, camera) view.
struct HitMap {
    /// Ray parameter, hit primitive, cos factor (ray length -> camera depth).
    hits: Vec<Option<(f64, usize)>>,
    cos_z: Vec<f64>,
    rays_world: Vec<Ray>,
}

fn trace_view(scene: &Scene, frame: usize, cam: &Camera, t_max: f64) -> HitMap {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let ego_to_world = scene.ego_to_world(frame);
    let mut hits = Vec::with_capacity(w * h);
    let mut cos_z = Vec::with_capacity(w * h);
    let mut rays_world = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (ray_ego, cz) = cam.ray(&Vector2::new(x as f64, y as f64));
            let ray = ray_ego.transformed(&ego_to_world);
            hits.push(sphere_trace(scene, frame as f64, &ray, t_max));
            cos_z.push(cz);
            rays_world.push(ray);
        }
    }
    HitMap {
        hits,
        cos_z,
        rays_world,
    }
}

/// Projects the world point a hit pixel sees into camera `cam` at another
/// frame, after advecting it by `d_frames` along its primitive's motion.
fn flow_to_frame(
    scene: &Scene,
    hit_world: &Vector3<f64>,
    prim: usize,
    d_frames: f64,
    cam: &Camera,
    target_frame: usize,
) -> Option<Vector2<f64>> {
    let p = &scene.primitives[prim];
    let adv = if p.movable {
        hit_world + Vector3::new(p.velocity.x, p.velocity.y, 0.0) * d_frames
    } else {
        *hit_world
    };
    let p_ego = scene.ego_to_world(target_frame).inverse().transform_point(&adv);
    cam.project(&p_ego).ok()
}

/// Renders the full sequence: images, movable masks, ground-truth depth and
/// forward flow, noisy forward and backward flow cues, and per-frame LiDAR
/// sweeps. Deterministic for a fixed scene (including its seed).
///
/// Ground-truth depth and flow are left invalid (zero) wherever the hit point
/// falls outside the reference-frame grid box: nothing outside the modeled
/// volume is recoverable, so those pixels are not scored. Images and cues are
/// not restricted.
pub fn build_frameset(scene: &Scene) -> FrameSet {
    let cams = scene.cameras();
    let t_max = 200.0;
    let mut noise = ChaCha8Rng::seed_from_u64(scene.seed ^ 0xf10c);
    let (box_lo, box_hi) = scene.spec.aabb();
    let ref_from_world = scene.ego_to_world(scene.t_ref).inverse();
    let views: Vec<Vec<HitMap>> = (0..scene.n_frames)
        .map(|t| cams.iter().map(|c| trace_view(scene, t, c, t_max)).collect())
        .collect();

    let mut frames = Vec::with_capacity(scene.n_frames);
    for t in 0..scene.n_frames {
        let mut images = Vec::new();
        let mut movable_masks = Vec::new();
        let mut gt_depth = Vec::new();
        let mut gt_flow = Vec::new();
        let mut cue_forward = Vec::new();
        let mut cue_backward = Vec::new();
        for (c, cam) in cams.iter().enumerate() {
            let hm = &views[t][c];
            let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
            let mut img = ImageRgb::new(w, h);
            let mut mask = MaskMap::new(w, h);
            let mut depth = ScalarMap::new(w, h);
            let mut flow = FlowMap::new(w, h);
            let mut fwd_cue = FlowMap::new(w, h);
            let mut bwd_cues: BTreeMap<usize, FlowMap> =
                (0..t).map(|ta| (ta, FlowMap::new(w, h))).collect();
            for y in 0..h {
                for x in 0..w {
                    let px = y * w + x;
                    let Some((tt, prim)) = hm.hits[px] else {
                        continue;
                    };
                    let p_world = hm.rays_world[px].at(tt);
                    let shape = &scene.primitives[prim];
                    let local = shape
                        .shape
                        .local(&p_world, &shape.offset_at(t as f64));
                    img.set_pixel(x, y, texture(shape.texture_seed, &local));
                    mask.set(x, y, shape.movable);
                    let p_ref = ref_from_world.transform_point(&p_world);
                    let in_box = (0..3).all(|a| p_ref[a] > box_lo[a] && p_ref[a] < box_hi[a]);
                    if in_box {
                        depth.set(x, y, tt * hm.cos_z[px]);
                    }
                    let here = Vector2::new(x as f64, y as f64);
                    if t + 1 < scene.n_frames {
                        if let Some(x2) = flow_to_frame(scene, &p_world, prim, 1.0, cam, t + 1) {
                            let f = x2 - here;
                            if in_box {
                                flow.set(x, y, [f.x, f.y]);
                            }
                            fwd_cue.set(
                                x,
                                y,
                                [
                                    f.x + scene.cue_noise_px * gauss(&mut noise),
                                    f.y + scene.cue_noise_px * gauss(&mut noise),
                                ],
                            );
                        }
                    }
                    for ta in 0..t {
                        if let Some(x2) = flow_to_frame(
                            scene,
                            &p_world,
                            prim,
                            ta as f64 - t as f64,
                            cam,
                            ta,
                        ) {
                            let f = x2 - here;
                            bwd_cues.get_mut(&ta).unwrap().set(
                                x,
                                y,
                                [
                                    f.x + scene.cue_noise_px * gauss(&mut noise),
                                    f.y + scene.cue_noise_px * gauss(&mut noise),
                                ],
                            );
                        }
                    }
                }
            }
            images.push(img);
            movable_masks.push(mask);
            gt_depth.push(Some(depth));
            gt_flow.push(if t + 1 < scene.n_frames { Some(flow) } else { None });
            cue_forward.push(if t + 1 < scene.n_frames { Some(fwd_cue) } else { None });
            cue_backward.push(bwd_cues);
        }
        frames.push(FrameData {
            ego_to_world: scene.ego_to_world(t),
            images,
            movable: movable_masks,
            cue_forward,
            cue_backward,
            gt_depth,
            gt_flow,
            lidar: lidar_sweep(scene, t, &mut noise),
        });
    }
    FrameSet {
        cameras: cams,
        frames,
        delta_t: scene.delta_t,
        lidar_origin: Some(scene.lidar_origin),
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One LiDAR sweep at `frame`, returned as ego-frame hit points. Only hits
/// landing inside the reference-frame grid box are kept, since nothing else
/// can supervise the grid.
fn lidar_sweep(scene: &Scene, frame: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let ego_to_world = scene.ego_to_world(frame);
    let world_to_ego = ego_to_world.inverse();
    let origin_world = ego_to_world.transform_point(&scene.lidar_origin);
    let (lo, hi) = scene.spec.aabb();
    let ref_from_world = scene.ego_to_world(scene.t_ref).inverse();
    let mut pts = Vec::new();
    for ia in 0..scene.lidar_n_az {
        for ie in 0..scene.lidar_n_el {
            let fa = (ia as f64 + 0.5) / scene.lidar_n_az as f64;
            let fe = (ie as f64 + 0.5) / scene.lidar_n_el as f64;
            let jit = 0.3f64.to_radians();
            let az = scene.lidar_az_span.0
                + fa * (scene.lidar_az_span.1 - scene.lidar_az_span.0)
                + rng.gen_range(-jit..jit);
            let el = scene.lidar_el_span.0
                + fe * (scene.lidar_el_span.1 - scene.lidar_el_span.0)
                + rng.gen_range(-jit..jit);
            let dir_ego = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let ray = Ray::new(origin_world, ego_to_world.rotate(&dir_ego)).unwrap();
            if let Some((t, _)) = sphere_trace(scene, frame as f64, &ray, 120.0) {
                let p_world = ray.at(t);
                let p_ref = ref_from_world.transform_point(&p_world);
                let inside = (0..3).all(|a| p_ref[a] > lo[a] && p_ref[a] < hi[a]);
                if inside {
                    pts.push(world_to_ego.transform_point(&p_world));
                }
            }
        }
    }
    pts
}

/// The fixed benchmark scene: textured ground plane, three static boxes, two
/// movable spheres crossing the view, five frames of forward ego motion, a
/// three-camera rig, and a LiDAR.
pub fn standard_scene(seed: u64) -> Scene {
    let spec = GridSpec::new([64, 64, 32], [0.0, -6.4, -0.8], [0.2, 0.2, 0.2]).unwrap();
    let prim = |shape, velocity, movable, n: u64| Primitive {
        shape,
        velocity,
        movable,
        texture_seed: mix64(seed.wrapping_add(n)),
    };
    Scene {
        primitives: vec![
            prim(Shape::Ground { z: 0.0 }, Vector2::zeros(), false, 1),
            prim(
                Shape::Cuboid {
                    center: Vector3::new(4.0, 1.5, 0.5),
                    half: Vector3::new(0.5, 0.5, 0.5),
                },
                Vector2::zeros(),
                false,
                2,
            ),
            prim(
                Shape::Cuboid {
                    center: Vector3::new(9.5, -3.5, 0.75),
                    half: Vector3::new(0.7, 0.6, 0.75),
                },
                Vector2::zeros(),
                false,
                3,
            ),
            prim(
                Shape::Cuboid {
                    center: Vector3::new(11.0, 0.5, 0.6),
                    half: Vector3::new(0.6, 0.8, 0.6),
                },
                Vector2::zeros(),
                false,
                4,
            ),
            prim(
                Shape::Sphere {
                    center: Vector3::new(5.3, -2.3, 0.95),
                    radius: 0.9,
                },
                Vector2::new(0.4, 0.0),
                true,
                5,
            ),
            prim(
                Shape::Sphere {
                    center: Vector3::new(8.6, 1.3, 0.85),
                    radius: 0.8,
                },
                Vector2::new(-0.2, 0.3),
                true,
                6,
            ),
        ],
        spec,
        n_frames: 5,
        t_ref: 3,
        delta_t: 0.1,
        ego_step: 0.5,
        cam_yaws: vec![0.0, 30f64.to_radians(), -30f64.to_radians()],
        cam_pitch: -10f64.to_radians(),
        cam_height: 1.5,
        img_width: 256,
        img_height: 192,
        focal: 170.0,
        lidar_origin: Vector3::new(0.0, 0.0, 1.8),
        lidar_n_az: 96,
        lidar_n_el: 20,
        lidar_az_span: (-72f64.to_radians(), 72f64.to_radians()),
        lidar_el_span: (-35f64.to_radians(), 4f64.to_radians()),
        cue_noise_px: 0.5,
        seed,
    }
}

/// Shrinks the rig for fast tests and ablation sweeps: fewer pixels and
/// LiDAR beams, same geometry.
pub fn shrink_scene(scene: &mut Scene, width: usize, height: usize) {
    scene.focal *= width as f64 / scene.img_width as f64;
    scene.img_width = width;
    scene.img_height = height;
    scene.lidar_n_az = 48;
    scene.lidar_n_el = 12;
}
