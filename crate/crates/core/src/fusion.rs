//! Depth fusion into sparse TSDF volumes, plus a procedural room generator and
//! depth raycaster standing in for captured scan sequences.
//!
//! Cameras follow the pinhole convention: x right, y down, z forward. A
//! frame's pose maps camera coordinates to world coordinates; world z is up.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::LayoutBox;
use crate::par;
use crate::voxgrid::{Block, BlockCoord, SparseTsdfVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Centered principal point with a horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self { fx: f, fy: f, cx: 0.5 * width as f64, cy: 0.5 * height as f64 }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Camera at `eye` looking at `target` with world +z as up.
    pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = Vector3::from(target) - eye;
        if forward.norm() < 1e-9 {
            return Err(Error::InvalidPose("eye and target coincide".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&Vector3::z());
        if right.norm() < 1e-6 {
            return Err(Error::InvalidPose("view direction parallel to up".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        Ok(Self { rotation: Matrix3::from_columns(&[right, down, forward]), translation: eye })
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if !r.iter().all(|x| x.is_finite()) || !self.translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::InvalidPose(format!("rotation not orthonormal (error {err:.3e})")));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPose(format!("rotation determinant {det}")));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major depth along camera z in meters; 0 marks an invalid pixel.
    pub depth: Vec<f32>,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl DepthFrame {
    pub fn validate(&self) -> Result<()> {
        self.pose.validate()?;
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::InvalidPose(format!("focal lengths must be positive ({}, {})", k.fx, k.fy)));
        }
        if !(0.0..=self.width as f64).contains(&k.cx) || !(0.0..=self.height as f64).contains(&k.cy) {
            return Err(Error::InvalidPose(format!("principal point ({}, {}) outside image", k.cx, k.cy)));
        }
        if self.depth.len() != self.width * self.height {
            return Err(Error::InvalidArgument(format!(
                "depth has {} values for a {}x{} frame",
                self.depth.len(),
                self.width,
                self.height
            )));
        }
        if self.depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidArgument("depth values must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// `DPTH` binary: magic, width u32, height u32, fx fy cx cy f64,
    /// pose 12×f64 (row-major R then t), width×height f32 depths.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 + 16 * 8 + self.depth.len() * 4);
        out.extend_from_slice(b"DPTH");
        out.write_u32::<LittleEndian>(self.width as u32).expect("vec write");
        out.write_u32::<LittleEndian>(self.height as u32).expect("vec write");
        let k = &self.intrinsics;
        for v in [k.fx, k.fy, k.cx, k.cy] {
            out.write_f64::<LittleEndian>(v).expect("vec write");
        }
        for r in 0..3 {
            for c in 0..3 {
                out.write_f64::<LittleEndian>(self.pose.rotation[(r, c)]).expect("vec write");
            }
        }
        for i in 0..3 {
            out.write_f64::<LittleEndian>(self.pose.translation[i]).expect("vec write");
        }
        for &d in &self.depth {
            out.write_f32::<LittleEndian>(d).expect("vec write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let io = |e: std::io::Error| Error::format("depth frame", e.to_string());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != b"DPTH" {
            return Err(Error::format("depth frame", "bad magic"));
        }
        let width = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let height = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut k = [0f64; 4];
        r.read_f64_into::<LittleEndian>(&mut k).map_err(io)?;
        let mut p = [0f64; 12];
        r.read_f64_into::<LittleEndian>(&mut p).map_err(io)?;
        let mut depth = vec![0f32; width * height];
        r.read_f32_into::<LittleEndian>(&mut depth).map_err(io)?;
        Ok(Self {
            width,
            height,
            depth,
            intrinsics: Intrinsics { fx: k[0], fy: k[1], cx: k[2], cy: k[3] },
            pose: Pose {
                rotation: Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8]),
                translation: Vector3::new(p[9], p[10], p[11]),
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Settings for integrating frames into a volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub voxel_size: f64,
    /// Truncation as a multiple of the voxel size.
    pub truncation_factor: f64,
    pub block_edge: usize,
    /// Maximum projective distance in front of a surface that is still carved
    /// to Empty, as a multiple of the truncation. `None` carves the whole ray.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub carve_range_factor: Option<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { voxel_size: 0.02, truncation_factor: 3.0, block_edge: 8, carve_range_factor: None }
    }
}

impl FusionConfig {
    pub fn truncation(&self) -> f64 {
        self.truncation_factor * self.voxel_size
    }

    pub fn new_volume(&self) -> Result<SparseTsdfVolume> {
        SparseTsdfVolume::new(self.voxel_size, self.truncation(), self.block_edge)
    }
}

/// Integrates one depth frame with unit observation weight.
///
/// For each voxel projecting onto a valid pixel, `d = depth - z_cam`:
/// voxels with `d < -truncation` are untouched, voxels inside the band get a
/// running average of `d`, and voxels in front of the band (up to the carve
/// range) are averaged toward `+truncation`.
pub fn integrate_frame(volume: &mut SparseTsdfVolume, frame: &DepthFrame, carve_range: Option<f64>) -> Result<()> {
    frame.validate()?;
    let valid: Vec<f32> = frame.depth.iter().copied().filter(|&d| d > 0.0).collect();
    if valid.is_empty() {
        return Ok(());
    }
    let trunc = volume.truncation();
    let min_d = valid.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let max_d = valid.iter().copied().fold(0.0f32, f32::max) as f64;
    let z_far = max_d + trunc;
    let z_near = carve_range.map_or(1e-3, |c| (min_d - c).max(1e-3));

    let k = frame.intrinsics;
    let (w, h) = (frame.width as f64, frame.height as f64);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut extend = |p: Vector3<f64>| {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    };
    for &z in &[z_near, z_far] {
        for &(u, v) in &[(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            let c = Vector3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
            extend(frame.pose.rotation * c + frame.pose.translation);
        }
    }
    let vs = volume.voxel_size();
    let edge = volume.block_edge() as i32;
    let block_lo: Vec<i32> = (0..3).map(|a| ((lo[a] / vs).floor() as i32 - 1).div_euclid(edge)).collect();
    let block_hi: Vec<i32> = (0..3).map(|a| ((hi[a] / vs).ceil() as i32 + 1).div_euclid(edge)).collect();
    let mut candidates: Vec<BlockCoord> = Vec::new();
    for bx in block_lo[0]..=block_hi[0] {
        for by in block_lo[1]..=block_hi[1] {
            for bz in block_lo[2]..=block_hi[2] {
                candidates.push([bx, by, bz]);
            }
        }
    }

    let vol: &SparseTsdfVolume = volume;
    let updates: Vec<Option<(BlockCoord, Block)>> =
        par::map_slice(&candidates, |&b| update_block(vol, frame, b, z_far, carve_range));
    for (coord, block) in updates.into_iter().flatten() {
        volume.insert_block(coord, block);
    }
    Ok(())
}

/// Block footprint test against the image and depth range.
fn block_may_project(vol: &SparseTsdfVolume, frame: &DepthFrame, b: BlockCoord, z_far: f64) -> bool {
    let e = vol.block_edge() as f64;
    let vs = vol.voxel_size();
    let k = frame.intrinsics;
    let mut min_z = f64::INFINITY;
    let (mut u_lo, mut u_hi, mut v_lo, mut v_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut behind = false;
    for corner in 0..8 {
        let off = [(corner & 1) as f64, ((corner >> 1) & 1) as f64, ((corner >> 2) & 1) as f64];
        let p = Vector3::new(
            (b[0] as f64 * e + off[0] * (e - 1.0)) * vs,
            (b[1] as f64 * e + off[1] * (e - 1.0)) * vs,
            (b[2] as f64 * e + off[2] * (e - 1.0)) * vs,
        );
        let c = frame.pose.world_to_camera(&p);
        min_z = min_z.min(c.z);
        if c.z <= 1e-9 {
            behind = true;
            continue;
        }
        let u = k.fx * c.x / c.z + k.cx;
        let v = k.fy * c.y / c.z + k.cy;
        u_lo = u_lo.min(u);
        u_hi = u_hi.max(u);
        v_lo = v_lo.min(v);
        v_hi = v_hi.max(v);
    }
    if min_z > z_far {
        return false;
    }
    if behind {
        // some corners behind the camera: only reject if all are
        return u_lo.is_finite() || min_z > 0.0;
    }
    !(u_hi < 0.0 || v_hi < 0.0 || u_lo >= frame.width as f64 || v_lo >= frame.height as f64)
}

fn update_block(
    vol: &SparseTsdfVolume,
    frame: &DepthFrame,
    b: BlockCoord,
    z_far: f64,
    carve_range: Option<f64>,
) -> Option<(BlockCoord, Block)> {
    if !block_may_project(vol, frame, b, z_far) {
        return None;
    }
    let trunc = vol.truncation();
    let trunc32 = trunc as f32;
    let n = vol.block_edge().pow(3);
    let mut block = vol
        .block(&b)
        .cloned()
        .unwrap_or_else(|| Block { tsdf: vec![-trunc32; n], weight: vec![0.0; n] });
    let k = frame.intrinsics;
    let mut touched = false;
    for i in 0..n {
        let p = Vector3::from(vol.world_position(vol.voxel_of(b, i)));
        let c = frame.pose.world_to_camera(&p);
        if c.z <= 0.0 {
            continue;
        }
        let u = (k.fx * c.x / c.z + k.cx).floor();
        let v = (k.fy * c.y / c.z + k.cy).floor();
        if u < 0.0 || v < 0.0 || u >= frame.width as f64 || v >= frame.height as f64 {
            continue;
        }
        let depth = frame.depth[v as usize * frame.width + u as usize] as f64;
        if depth <= 0.0 {
            continue;
        }
        let d = depth - c.z;
        if d < -trunc || carve_range.is_some_and(|r| d > r) {
            continue;
        }
        let sample = d.min(trunc) as f32 as f64;
        let w = block.weight[i] as f64;
        let avg = (block.tsdf[i] as f64 * w + sample) / (w + 1.0);
        block.tsdf[i] = (avg as f32).clamp(-trunc32, trunc32);
        block.weight[i] = (w + 1.0) as f32;
        touched = true;
    }
    touched.then_some((b, block))
}

/// Fuses a frame sequence into a fresh volume.
pub fn fuse_frames(frames: &[DepthFrame], cfg: &FusionConfig) -> Result<SparseTsdfVolume> {
    let mut vol = cfg.new_volume()?;
    let carve = cfg.carve_range_factor.map(|f| f * cfg.truncation());
    for f in frames {
        integrate_frame(&mut vol, f, carve)?;
    }
    Ok(vol)
}

// ---- procedural scenes ------------------------------------------------------

/// Box rotated about the world z axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub yaw: f64,
}

impl OrientedBox {
    /// Axis-aligned hull as (min, max).
    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        let (s, c) = self.yaw.sin_cos();
        let [hx, hy, hz] = self.half_extents;
        let ex = c.abs() * hx + s.abs() * hy;
        let ey = s.abs() * hx + c.abs() * hy;
        let [cx, cy, cz] = self.center;
        ([cx - ex, cy - ey, cz - hz], [cx + ex, cy + ey, cz + hz])
    }

    /// Smallest positive ray parameter where the ray enters the box.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let (s, c) = self.yaw.sin_cos();
        let to_local = |v: Vector3<f64>| Vector3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z);
        let o = to_local(origin - Vector3::from(self.center));
        let d = to_local(*dir);
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let h = self.half_extents[a];
            if d[a].abs() < 1e-15 {
                if o[a].abs() > h {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((-h - o[a]) / d[a], (h - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        if t0 > t1 || t1 <= 0.0 {
            return None;
        }
        Some(if t0 > 0.0 { t0 } else { t1 })
    }

    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let v = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let local = [c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]];
        (0..3).all(|a| local[a].abs() <= self.half_extents[a] + margin)
    }
}

/// Infinite plane `normal · p = offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = Vector3::from(self.normal);
        let denom = n.dot(dir);
        if denom.abs() < 1e-15 {
            return None;
        }
        let t = (self.offset - n.dot(origin)) / denom;
        (t > 0.0).then_some(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: OrientedBox,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProceduralScene {
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub planes: Vec<Plane>,
    pub objects: Vec<SceneObject>,
}

impl ProceduralScene {
    /// Six inward-facing room planes for the box `[min, max]`.
    pub fn room_planes(min: [f64; 3], max: [f64; 3]) -> Vec<Plane> {
        let mut planes = Vec::with_capacity(6);
        for a in 0..3 {
            let mut n = [0.0; 3];
            n[a] = 1.0;
            planes.push(Plane { normal: n, offset: min[a] });
            planes.push(Plane { normal: n, offset: max[a] });
        }
        planes
    }

    /// Labeled axis-aligned hulls of the objects.
    pub fn layout_boxes(&self) -> Vec<LayoutBox> {
        self.objects
            .iter()
            .map(|o| {
                let (lo, hi) = o.bbox.aabb();
                LayoutBox {
                    centroid: [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])],
                    size: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
                    label: o.label.clone(),
                }
            })
            .collect()
    }

    /// First hit distance along the ray, if any.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let planes = self.planes.iter().filter_map(|p| p.intersect(origin, dir));
        let boxes = self.objects.iter().filter_map(|o| o.bbox.intersect(origin, dir));
        planes.chain(boxes).fold(None, |best, t| Some(best.map_or(t, |b: f64| b.min(t))))
    }
}

/// Parameters of the procedural room generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub room_size_min: [f64; 3],
    pub room_size_max: [f64; 3],
    pub object_count: [usize; 2],
    pub object_size_min: [f64; 3],
    pub object_size_max: [f64; 3],
    pub vocabulary: Vec<String>,
    /// Clearance kept between objects and walls.
    pub wall_margin: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room_size_min: [1.6, 1.6, 2.2],
            room_size_max: [2.0, 2.0, 2.2],
            object_count: [2, 5],
            object_size_min: [0.2, 0.2, 0.2],
            object_size_max: [0.6, 0.6, 1.0],
            vocabulary: ["chair", "table", "cabinet", "bed", "sofa", "shelf"].iter().map(|s| s.to_string()).collect(),
            wall_margin: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.room_size_min[a] > 0.0) || self.room_size_min[a] > self.room_size_max[a] {
                return Err(Error::InvalidArgument(format!(
                    "room size range on axis {a} is degenerate: [{}, {}]",
                    self.room_size_min[a], self.room_size_max[a]
                )));
            }
            if !(self.object_size_min[a] > 0.0) || self.object_size_min[a] > self.object_size_max[a] {
                return Err(Error::InvalidArgument(format!("object size range on axis {a} is invalid")));
            }
        }
        if self.object_count[0] > self.object_count[1] {
            return Err(Error::InvalidArgument("object count min exceeds max".into()));
        }
        if self.vocabulary.is_empty() && self.object_count[1] > 0 {
            return Err(Error::InvalidArgument("empty label vocabulary".into()));
        }
        Ok(())
    }
}

/// Deterministic room with floor-standing boxes.
pub fn make_scene(seed: u64, spec: &SceneSpec) -> Result<ProceduralScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut size = [0.0; 3];
    for a in 0..3 {
        size[a] = rng.random_range(spec.room_size_min[a]..=spec.room_size_max[a]);
    }
    let room_min = [0.0; 3];
    let room_max = size;
    let count = rng.random_range(spec.object_count[0]..=spec.object_count[1]);
    let m = spec.wall_margin;
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let mut half = [0.0; 3];
        for a in 0..3 {
            let s = rng.random_range(spec.object_size_min[a]..=spec.object_size_max[a]);
            half[a] = (0.5 * s).min(0.5 * size[a] - m - 1e-3).max(1e-3);
        }
        let yaw = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = yaw.sin_cos();
        let ex = (c.abs() * half[0] + s.abs() * half[1]).min(0.5 * size[0] - m);
        let ey = (s.abs() * half[0] + c.abs() * half[1]).min(0.5 * size[1] - m);
        let cx = rng.random_range((m + ex)..=(size[0] - m - ex).max(m + ex));
        let cy = rng.random_range((m + ey)..=(size[1] - m - ey).max(m + ey));
        let label = spec.vocabulary[rng.random_range(0..spec.vocabulary.len())].clone();
        objects.push(SceneObject { bbox: OrientedBox { center: [cx, cy, half[2]], half_extents: half, yaw }, label });
    }
    Ok(ProceduralScene { room_min, room_max, planes: ProceduralScene::room_planes(room_min, room_max), objects })
}

/// Renders z-depth by casting one ray through each pixel center.
pub fn render_depth(scene: &ProceduralScene, pose: &Pose, intrinsics: Intrinsics, width: usize, height: usize) -> Result<DepthFrame> {
    pose.validate()?;
    let origin = pose.translation;
    let rows: Vec<Vec<f32>> = par::map_range(height, |v| {
        (0..width)
            .map(|u| {
                let x = (u as f64 + 0.5 - intrinsics.cx) / intrinsics.fx;
                let y = (v as f64 + 0.5 - intrinsics.cy) / intrinsics.fy;
                // unit camera-z component, so the hit parameter is the depth
                let dir = pose.rotation * Vector3::new(x, y, 1.0);
                scene.raycast(&origin, &dir).map_or(0.0, |t| t as f32)
            })
            .collect()
    });
    Ok(DepthFrame { width, height, depth: rows.concat(), intrinsics, pose: *pose })
}

/// Camera model and placement rules for simulated scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureSpec {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Camera height range in meters.
    pub camera_height: [f64; 2],
    /// Clearance from walls and objects.
    pub clearance: f64,
    pub max_attempts_per_frame: usize,
}

impl Default for CaptureSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            fov_deg: 75.0,
            camera_height: [1.2, 1.8],
            clearance: 0.15,
            max_attempts_per_frame: 200,
        }
    }
}

/// Samples camera poses in free space looking into the room.
pub fn sample_camera_poses(scene: &ProceduralScene, n: usize, seed: u64, capture: &CaptureSpec) -> Result<Vec<Pose>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (scene.room_min, scene.room_max);
    let c = capture.clearance;
    let z_lo = capture.camera_height[0].max(lo[2] + c);
    let z_hi = capture.camera_height[1].min(hi[2] - c);
    let budget = capture.max_attempts_per_frame * n.max(1);
    if z_lo > z_hi || lo[0] + c >= hi[0] - c || lo[1] + c >= hi[1] - c {
        return Err(Error::CameraPlacement { attempts: 0 });
    }
    let mut poses = Vec::with_capacity(n);
    let mut attempts = 0;
    while poses.len() < n {
        if attempts >= budget {
            return Err(Error::CameraPlacement { attempts });
        }
        attempts += 1;
        let eye = [
            rng.random_range(lo[0] + c..hi[0] - c),
            rng.random_range(lo[1] + c..hi[1] - c),
            rng.random_range(z_lo..=z_hi),
        ];
        let target = [
            rng.random_range(lo[0]..hi[0]),
            rng.random_range(lo[1]..hi[1]),
            rng.random_range(lo[2]..lo[2] + 0.6 * (hi[2] - lo[2])),
        ];
        if scene.objects.iter().any(|o| o.bbox.contains(eye, c)) {
            continue;
        }
        let dist = ((eye[0] - target[0]).powi(2) + (eye[1] - target[1]).powi(2) + (eye[2] - target[2]).powi(2)).sqrt();
        if dist < 0.5 {
            continue;
        }
        match Pose::look_at(eye, target) {
            Ok(p) => poses.push(p),
            Err(_) => continue,
        }
    }
    Ok(poses)
}

/// Renders a scan sequence of `n_frames` views.
pub fn capture_frames(scene: &ProceduralScene, n_frames: usize, seed: u64, capture: &CaptureSpec) -> Result<Vec<DepthFrame>> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("n_frames must be at least 1".into()));
    }
    let intr = Intrinsics::from_fov(capture.width, capture.height, capture.fov_deg);
    sample_camera_poses(scene, n_frames, seed, capture)?
        .iter()
        .map(|p| render_depth(scene, p, intr, capture.width, capture.height))
        .collect()
}

/// Captures and fuses a partial scan; returns the volume and the scene's
/// labeled layout boxes.
pub fn simulate_partial_scan(
    scene: &ProceduralScene,
    n_frames: usize,
    seed: u64,
    capture: &CaptureSpec,
    fusion: &FusionConfig,
) -> Result<(SparseTsdfVolume, Vec<LayoutBox>)> {
    let frames = capture_frames(scene, n_frames, seed, capture)?;
    Ok((fuse_frames(&frames, fusion)?, scene.layout_boxes()))
}

/// Keeps a seeded subset of `ceil(keep_fraction * n)` frames in original order.
pub fn degrade_scan(frames: &[DepthFrame], keep_fraction: f64, seed: u64) -> Result<Vec<DepthFrame>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep_fraction must be in (0, 1], got {keep_fraction}")));
    }
    if keep_fraction == 1.0 {
        return Ok(frames.to_vec());
    }
    let keep = ((keep_fraction * frames.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut idx: Vec<usize> = (0..frames.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| frames[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxgrid::VoxelState;

    fn wall_scene(x: f64) -> ProceduralScene {
        ProceduralScene {
            room_min: [-5.0; 3],
            room_max: [x, 5.0, 5.0],
            planes: vec![Plane { normal: [1.0, 0.0, 0.0], offset: x }],
            objects: vec![],
        }
    }

    fn facing_x() -> Pose {
        // camera z -> world +x, camera x -> world -y, camera y -> world -z
        Pose::look_at([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn centered_pixel_hits_wall_exactly() {
        let intr = Intrinsics { fx: 50.0, fy: 50.0, cx: 32.0, cy: 32.0 };
        let f = render_depth(&wall_scene(2.0), &facing_x(), intr, 64, 64).unwrap();
        assert_eq!(f.depth[32 * 64 + 32], 2.0);
        assert!(f.depth.iter().all(|&d| (d - 2.0).abs() < 1e-6));
    }

    #[test]
    fn void_renders_zero() {
        let scene = ProceduralScene { room_min: [0.0; 3], room_max: [1.0; 3], planes: vec![], objects: vec![] };
        let f = render_depth(&scene, &Pose::identity(), Intrinsics::from_fov(16, 16, 60.0), 16, 16).unwrap();
        assert!(f.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn rejects_non_orthonormal_pose() {
        let mut pose = Pose::identity();
        pose.rotation[(0, 0)] = 1.01;
        let frame = DepthFrame {
            width: 2,
            height: 2,
            depth: vec![1.0; 4],
            intrinsics: Intrinsics { fx: 1.0, fy: 1.0, cx: 1.0, cy: 1.0 },
            pose,
        };
        let mut vol = SparseTsdfVolume::with_voxel_size(0.05).unwrap();
        assert!(matches!(integrate_frame(&mut vol, &frame, None), Err(Error::InvalidPose(_))));
        let mut reflect = Pose::identity();
        reflect.rotation[(0, 0)] = -1.0;
        assert!(reflect.validate().is_err());
    }

    #[test]
    fn invalid_depth_is_a_noop() {
        let intr = Intrinsics::from_fov(8, 8, 60.0);
        let frame = DepthFrame { width: 8, height: 8, depth: vec![0.0; 64], intrinsics: intr, pose: facing_x() };
        let mut vol = SparseTsdfVolume::with_voxel_size(0.05).unwrap();
        integrate_frame(&mut vol, &frame, None).unwrap();
        assert_eq!(vol.num_blocks(), 0);
    }

    #[test]
    fn identical_frames_double_weight_only() {
        let intr = Intrinsics::from_fov(24, 24, 60.0);
        let f = render_depth(&wall_scene(1.0), &facing_x(), intr, 24, 24).unwrap();
        let cfg = FusionConfig { voxel_size: 0.05, ..Default::default() };
        let one = fuse_frames(std::slice::from_ref(&f), &cfg).unwrap();
        let two = fuse_frames(&[f.clone(), f], &cfg).unwrap();
        assert_eq!(one.block_coords(), two.block_coords());
        for b in one.block_coords() {
            let (a, c) = (one.block(&b).unwrap(), two.block(&b).unwrap());
            assert_eq!(a.tsdf, c.tsdf);
            for (wa, wc) in a.weight.iter().zip(&c.weight) {
                assert_eq!(2.0 * wa, *wc);
            }
        }
    }

    #[test]
    fn carving_marks_free_space_empty() {
        let intr = Intrinsics::from_fov(32, 32, 60.0);
        let f = render_depth(&wall_scene(1.0), &facing_x(), intr, 32, 32).unwrap();
        let cfg = FusionConfig { voxel_size: 0.05, ..Default::default() };
        let vol = fuse_frames(&[f], &cfg).unwrap();
        // 0.5 m in front of the wall along the optical axis
        assert_eq!(vol.classify_voxel([10, 0, 0]), VoxelState::Empty);
        assert!(matches!(vol.classify_voxel([20, 0, 0]), VoxelState::Surface(_)));
        // beyond the band behind the wall stays unobserved
        assert_eq!(vol.classify_voxel([24, 0, 0]), VoxelState::Unknown);
    }

    #[test]
    fn carve_range_limits_empty_region() {
        let intr = Intrinsics::from_fov(32, 32, 60.0);
        let f = render_depth(&wall_scene(1.0), &facing_x(), intr, 32, 32).unwrap();
        let mut vol = SparseTsdfVolume::with_voxel_size(0.05).unwrap();
        integrate_frame(&mut vol, &f, Some(0.3)).unwrap();
        assert_eq!(vol.classify_voxel([10, 0, 0]), VoxelState::Unknown);
        assert_eq!(vol.classify_voxel([15, 0, 0]), VoxelState::Empty);
    }

    #[test]
    fn depth_frame_bytes_roundtrip() {
        let intr = Intrinsics::from_fov(5, 3, 70.0);
        let pose = Pose::look_at([0.1, 0.2, 1.5], [1.0, 1.0, 0.0]).unwrap();
        let f = DepthFrame { width: 5, height: 3, depth: (0..15).map(|i| i as f32 * 0.1).collect(), intrinsics: intr, pose };
        assert_eq!(DepthFrame::from_bytes(&f.to_bytes()).unwrap(), f);
    }

    #[test]
    fn scene_generation_is_deterministic_and_bounded() {
        let spec = SceneSpec { object_count: [3, 3], ..Default::default() };
        let a = make_scene(7, &spec).unwrap();
        assert_eq!(a, make_scene(7, &spec).unwrap());
        assert_eq!(a.objects.len(), 3);
        for o in &a.objects {
            let (lo, hi) = o.bbox.aabb();
            for ax in 0..3 {
                assert!(hi[ax] > a.room_min[ax] && lo[ax] < a.room_max[ax]);
            }
        }
        let bad = SceneSpec { room_size_min: [0.0, 1.0, 1.0], ..Default::default() };
        assert!(make_scene(0, &bad).is_err());
    }

    #[test]
    fn degrade_keeps_ceil_fraction_subset() {
        let intr = Intrinsics::from_fov(2, 2, 60.0);
        let frames: Vec<DepthFrame> = (0..10)
            .map(|i| DepthFrame { width: 2, height: 2, depth: vec![i as f32; 4], intrinsics: intr, pose: Pose::identity() })
            .collect();
        assert_eq!(degrade_scan(&frames, 1.0, 3).unwrap(), frames);
        let half = degrade_scan(&frames, 0.5, 3).unwrap();
        assert_eq!(half.len(), 5);
        assert!(half.iter().all(|f| frames.contains(f)));
        assert_eq!(degrade_scan(&frames, 0.25, 3).unwrap().len(), 3);
        assert!(degrade_scan(&frames, 0.0, 3).is_err());
    }

    #[test]
    fn oriented_box_hull_contains_corners() {
        let b = OrientedBox { center: [1.0, 2.0, 0.5], half_extents: [0.3, 0.1, 0.5], yaw: 0.7 };
        let (lo, hi) = b.aabb();
        let (s, c) = b.yaw.sin_cos();
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                let (lx, ly) = (sx * 0.3, sy * 0.1);
                let p = [1.0 + c * lx - s * ly, 2.0 + s * lx + c * ly];
                assert!(p[0] >= lo[0] - 1e-12 && p[0] <= hi[0] + 1e-12);
                assert!(p[1] >= lo[1] - 1e-12 && p[1] <= hi[1] + 1e-12);
            }
        }
    }
}
