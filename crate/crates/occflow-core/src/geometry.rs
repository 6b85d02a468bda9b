//! Cameras, rigid transforms, rays, and the posed multi-view frame container.
//!
//! Conventions:
//! - ego frame: x forward, y left, z up; world frame likewise;
//! - camera frame: z forward (optical axis), x right, y down;
//! - "depth" is camera-frame z, not ray length;
//! - pixel (u, v) has its center at continuous coordinates (u, v);
//! - `ego_to_world` maps ego-frame points into the world frame,
//!   `cam_to_ego` maps camera-frame points into the ego frame.

use std::collections::BTreeMap;

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Vector2, Vector3};

use crate::error::Error;
use crate::maps::{FlowMap, ImageRgb, MaskMap, ScalarMap};
use crate::Result;

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if fx == 0.0 || fy == 0.0 || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::Config(format!(
                "intrinsics need nonzero finite focal lengths, got fx={fx} fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("intrinsics need a nonzero image size".into()));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera-frame point for pixel `x` at camera depth `d` (z = d).
    #[inline]
    pub fn unproject(&self, x: &Vector2<f64>, d: f64) -> Vector3<f64> {
        Vector3::new((x.x - self.cx) / self.fx * d, (x.y - self.cy) / self.fy * d, d)
    }

    /// Pixel for a camera-frame point with positive z.
    #[inline]
    pub fn project(&self, q: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(q.z > 0.0) {
            return Err(Error::NonPositiveDepth(q.z));
        }
        Ok(Vector2::new(
            self.fx * q.x / q.z + self.cx,
            self.fy * q.y / q.z + self.cy,
        ))
    }
}

/// Rotation + translation; maps points from its source frame into its target
/// frame: `p_target = R * p_source + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Parses a 4x4 homogeneous matrix; rejects non-rigid ones.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = m.row(3);
        if (bottom[0], bottom[1], bottom[2]) != (0.0, 0.0, 0.0) || (bottom[3] - 1.0).abs() > 1e-12
        {
            return Err(Error::Config(format!(
                "transform bottom row must be (0,0,0,1), got {bottom}"
            )));
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        RigidTransform::new(rotation, translation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::Config(format!(
                "rotation not orthonormal (max deviation {err:.3e})"
            )));
        }
        if r.determinant() < 0.0 {
            return Err(Error::Config("rotation has negative determinant".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("translation must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Inverse built from the transpose, so rigidity is preserved bit-cleanly.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self` after `other`: maps source of `other` into target of `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Yaw about +z (radians), counterclockwise looking down.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        RigidTransform {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }
}

/// A ray with unit direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, dir: Vector3<f64>) -> Result<Self> {
        let n = dir.norm();
        if n < 1e-12 {
            return Err(Error::DegenerateRay);
        }
        Ok(Ray {
            origin,
            dir: dir / n,
        })
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.dir * t
    }

    pub fn transformed(&self, t: &RigidTransform) -> Ray {
        Ray {
            origin: t.transform_point(&self.origin),
            dir: t.rotate(&self.dir),
        }
    }
}

/// Camera rig entry: intrinsics plus the fixed camera-to-ego extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub cam_to_ego: RigidTransform,
}

impl Camera {
    /// Ego-frame point for pixel `x` at camera depth `d > 0`.
    pub fn backproject(&self, x: &Vector2<f64>, d: f64) -> Result<Vector3<f64>> {
        if !(d > 0.0) {
            return Err(Error::NonPositiveDepth(d));
        }
        Ok(self.cam_to_ego.transform_point(&self.intrinsics.unproject(x, d)))
    }

    /// Pixel for an ego-frame point in front of the camera.
    pub fn project(&self, p_ego: &Vector3<f64>) -> Result<Vector2<f64>> {
        let q = self.cam_to_ego.inverse().transform_point(p_ego);
        self.intrinsics.project(&q)
    }

    /// Ego-frame viewing ray through pixel center `x`. Also returns the
    /// cosine factor converting ray length to camera depth (dir-z in the
    /// camera frame before normalization): `depth = t * cos_z`.
    pub fn ray(&self, x: &Vector2<f64>) -> (Ray, f64) {
        let d_cam = self.intrinsics.unproject(x, 1.0);
        let n = d_cam.norm();
        let dir_ego = self.cam_to_ego.rotate(&(d_cam / n));
        (
            Ray {
                origin: self.cam_to_ego.translation,
                dir: dir_ego,
            },
            1.0 / n,
        )
    }
}

/// Reprojection of pixel `x` at camera depth `d` into another frame's same
/// camera, displaced by scene flow `f` (ego meters): the full chain
/// `project(cam, T_rel * (backproject(cam, x, d) + f))`.
///
/// Tracks enough structure to also hand back the 2x3 Jacobian of the output
/// pixel with respect to the ego-frame displacement `f`, which is what the
/// flow-grid gradients chain through.
pub struct Reprojector<'a> {
    cam: &'a Camera,
    ego_to_cam: RigidTransform,
    t_rel: &'a RigidTransform,
    /// d(camera point)/d(flow displacement), constant over the image.
    dq_df: Matrix3<f64>,
}

impl<'a> Reprojector<'a> {
    pub fn new(cam: &'a Camera, t_rel: &'a RigidTransform) -> Self {
        let ego_to_cam = cam.cam_to_ego.inverse();
        let dq_df = ego_to_cam.rotation * t_rel.rotation;
        Reprojector {
            cam,
            ego_to_cam,
            t_rel,
            dq_df,
        }
    }

    /// Reprojects an ego-frame point `p` (already backprojected) displaced by
    /// `f`. Returns the target pixel and the Jacobian d(pixel)/d(f).
    pub fn reproject_point(
        &self,
        p: &Vector3<f64>,
        f: &Vector3<f64>,
    ) -> Result<(Vector2<f64>, Matrix2x3<f64>)> {
        let w = self.t_rel.transform_point(&(p + f));
        let q = self.ego_to_cam.transform_point(&w);
        if !(q.z > 0.0) {
            return Err(Error::NonPositiveDepth(q.z));
        }
        let ins = &self.cam.intrinsics;
        let px = Vector2::new(ins.fx * q.x / q.z + ins.cx, ins.fy * q.y / q.z + ins.cy);
        let du_dq = Matrix2x3::new(
            ins.fx / q.z,
            0.0,
            -ins.fx * q.x / (q.z * q.z),
            0.0,
            ins.fy / q.z,
            -ins.fy * q.y / (q.z * q.z),
        );
        Ok((px, du_dq * self.dq_df))
    }

    /// Full chain from pixel + depth + flow.
    pub fn reproject(
        &self,
        x: &Vector2<f64>,
        d: f64,
        f: &Vector3<f64>,
    ) -> Result<(Vector2<f64>, Matrix2x3<f64>)> {
        let p = self.cam.backproject(x, d)?;
        self.reproject_point(&p, f)
    }
}

/// Convenience wrapper: reprojected pixel only.
pub fn reproject_with_flow(
    cam: &Camera,
    t_rel: &RigidTransform,
    x: &Vector2<f64>,
    d: f64,
    f: &Vector3<f64>,
) -> Result<Vector2<f64>> {
    Ok(Reprojector::new(cam, t_rel).reproject(x, d, f)?.0)
}

/// The optical flow a static scene would induce: reprojection displacement at
/// zero scene flow. Shares the reprojection implementation bit-for-bit.
pub fn static_flow(
    cam: &Camera,
    t_rel: &RigidTransform,
    x: &Vector2<f64>,
    d: f64,
) -> Result<Vector2<f64>> {
    Ok(reproject_with_flow(cam, t_rel, x, d, &Vector3::zeros())? - x)
}

/// Rays from LiDAR hit points back to the sensor origin (all in one frame).
/// Returns (ray, range) pairs; zero-range points are rejected.
pub fn lidar_rays(points: &[Vector3<f64>], origin: &Vector3<f64>) -> Result<Vec<(Ray, f64)>> {
    points
        .iter()
        .map(|p| {
            let d = p - origin;
            let range = d.norm();
            if range < 1e-12 {
                return Err(Error::DegenerateRay);
            }
            Ok((
                Ray {
                    origin: *origin,
                    dir: d / range,
                },
                range,
            ))
        })
        .collect()
}

/// Slab clip of a ray against an axis-aligned box. Returns the entry/exit
/// parameters; entry may be negative when the origin is inside. `None` when
/// the forward ray never overlaps the box (`t_far <= max(t_near, 0)`).
pub fn aabb_clip(ray: &Ray, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.dir[a]);
        if d.abs() < 1e-15 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut ta, mut tb) = ((lo[a] - o) * inv, (hi[a] - o) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t1 > t0.max(0.0) {
        Some((t0, t1))
    } else {
        None
    }
}

/// One frame of a posed sequence. Vectors are indexed by camera.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub ego_to_world: RigidTransform,
    pub images: Vec<ImageRgb>,
    pub movable: Vec<MaskMap>,
    /// Optical-flow cue to the next frame, when available.
    pub cue_forward: Vec<Option<FlowMap>>,
    /// Optical-flow cues to earlier frames, keyed by target frame index.
    pub cue_backward: Vec<BTreeMap<usize, FlowMap>>,
    pub gt_depth: Vec<Option<ScalarMap>>,
    /// Ground-truth optical flow to the next frame (evaluation only).
    pub gt_flow: Vec<Option<FlowMap>>,
    /// LiDAR hit points in this frame's ego coordinates; empty when absent.
    pub lidar: Vec<Vector3<f64>>,
}

/// A posed multi-camera sequence plus optional cues and ground truth.
#[derive(Debug, Clone)]
pub struct FrameSet {
    pub cameras: Vec<Camera>,
    pub frames: Vec<FrameData>,
    /// Seconds between consecutive frames.
    pub delta_t: f64,
    /// LiDAR sensor origin in ego coordinates.
    pub lidar_origin: Option<Vector3<f64>>,
}

impl FrameSet {
    /// Relative ego pose: maps frame-`from` ego coordinates into frame-`to`
    /// ego coordinates.
    pub fn relative_pose(&self, from: usize, to: usize) -> RigidTransform {
        self.frames[to]
            .ego_to_world
            .inverse()
            .compose(&self.frames[from].ego_to_world)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Manifest(format!(
                "need at least 2 frames, got {}",
                self.frames.len()
            )));
        }
        if self.cameras.is_empty() {
            return Err(Error::Manifest("need at least one camera".into()));
        }
        if !(self.delta_t > 0.0) {
            return Err(Error::Manifest("delta_t must be positive".into()));
        }
        for cam in &self.cameras {
            cam.cam_to_ego.validate()?;
        }
        for (t, fr) in self.frames.iter().enumerate() {
            fr.ego_to_world.validate()?;
            let nc = self.cameras.len();
            let per_cam = [
                ("images", fr.images.len()),
                ("movable masks", fr.movable.len()),
                ("forward cues", fr.cue_forward.len()),
                ("backward cues", fr.cue_backward.len()),
                ("gt depth", fr.gt_depth.len()),
                ("gt flow", fr.gt_flow.len()),
            ];
            for (name, n) in per_cam {
                if n != nc {
                    return Err(Error::Manifest(format!(
                        "frame {t}: {name} count {n} != camera count {nc}"
                    )));
                }
            }
            for (c, cam) in self.cameras.iter().enumerate() {
                let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
                if fr.images[c].width != w || fr.images[c].height != h {
                    return Err(Error::DimensionMismatch(format!(
                        "frame {t} camera {c}: image {}x{} vs intrinsics {w}x{h}",
                        fr.images[c].width, fr.images[c].height
                    )));
                }
            }
            for (c, bw) in fr.cue_backward.iter().enumerate() {
                if let Some((&target, _)) = bw.iter().find(|(&target, _)| target >= t) {
                    return Err(Error::Manifest(format!(
                        "frame {t} camera {c}: backward cue targets non-earlier frame {target}"
                    )));
                }
            }
        }
        Ok(())
    }
}
