//! Triangle-mesh actors composited into splat renders by depth test, and
//! ray–triangle queries for the ray tracer and the LiDAR simulator.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffers::{FrameBuffers, NO_HIT};
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::kernel::Ray;
use crate::math::{quat_wxyz, Similarity, Vec3};
use crate::modality::{encode_seg_bits, MAX_LABEL};
use crate::raster::RasterView;
use crate::settings::RenderSettings;

#[derive(Clone, Debug, PartialEq)]
pub enum MeshColor {
    Uniform([f64; 3]),
    PerTriangle(Vec<[f64; 3]>),
}

#[derive(Clone, Debug)]
pub struct MeshInstance {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Vec<Vec3>,
    pub color: MeshColor,
    pub pose: Similarity,
    pub seg_label: u8,
    pub lidar_intensity: f64,
    world_vertices: Vec<Vec3>,
    world_normals: Vec<Vec3>,
    world_min: Vec3,
    world_max: Vec3,
}

impl MeshInstance {
    /// Validates the mesh and caches its world-space geometry. Missing
    /// normals are computed by area-weighted face averaging.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>, normals: Option<Vec<Vec3>>) -> Result<Self> {
        if let Some(bad) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Degenerate(format!("vertex {bad} is not finite")));
        }
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().position(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::Degenerate(format!("triangle {t} indexes past {n} vertices")));
        }
        let normals = match normals {
            Some(ns) if ns.len() == vertices.len() => ns,
            _ => area_weighted_normals(&vertices, &triangles),
        };
        let mut m = Self {
            vertices,
            triangles,
            normals,
            color: MeshColor::Uniform([0.7; 3]),
            pose: Similarity::identity(),
            seg_label: 0,
            lidar_intensity: 0.5,
            world_vertices: Vec::new(),
            world_normals: Vec::new(),
            world_min: Vec3::zeros(),
            world_max: Vec3::zeros(),
        };
        m.refresh();
        Ok(m)
    }

    pub fn with_pose(mut self, pose: Similarity) -> Result<Self> {
        if !(pose.scale > 0.0) {
            return Err(Error::Config("mesh pose scale must be > 0".into()));
        }
        self.pose = pose;
        self.refresh();
        Ok(self)
    }

    pub fn with_color(mut self, color: MeshColor) -> Self {
        self.color = color;
        self
    }

    pub fn with_label(mut self, seg_label: u8, lidar_intensity: f64) -> Result<Self> {
        if seg_label > MAX_LABEL {
            return Err(Error::Config(format!("seg_label {seg_label} outside 0..63")));
        }
        self.seg_label = seg_label;
        self.lidar_intensity = lidar_intensity.clamp(0.0, 1.0);
        Ok(self)
    }

    fn refresh(&mut self) {
        self.world_vertices = self.vertices.iter().map(|v| self.pose.transform_point(v)).collect();
        self.world_normals = self
            .normals
            .iter()
            .map(|n| (self.pose.rotation * n).try_normalize(0.0).unwrap_or(Vec3::zeros()))
            .collect();
        let (lo, hi) = self.world_vertices.iter().fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), v| (lo.inf(v), hi.sup(v)),
        );
        self.world_min = lo;
        self.world_max = hi;
    }

    pub fn world_vertices(&self) -> &[Vec3] {
        &self.world_vertices
    }

    pub fn triangle_color(&self, t: usize) -> [f64; 3] {
        match &self.color {
            MeshColor::Uniform(c) => *c,
            MeshColor::PerTriangle(cs) => cs.get(t).copied().unwrap_or([0.7; 3]),
        }
    }

    fn world_triangle(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.world_vertices[i as usize])
    }

    /// Unit geometric normal of a triangle in world space.
    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.world_triangle(t);
        (b - a).cross(&(c - a)).normalize()
    }

    fn shading_normal(&self, t: usize, bary: [f64; 3]) -> Vec3 {
        let tri = self.triangles[t];
        let n: Vec3 = (0..3).map(|k| self.world_normals[tri[k] as usize] * bary[k]).sum();
        n.try_normalize(1e-12).unwrap_or_else(|| self.face_normal(t))
    }

    fn ray_hits_bounds(&self, ray: &Ray) -> bool {
        crate::raytrace::Aabb {
            min: self.world_min - Vec3::repeat(1e-9),
            max: self.world_max + Vec3::repeat(1e-9),
        }
        .intersect(ray)
        .is_some()
    }
}

fn area_weighted_normals(vertices: &[Vec3], triangles: &[[u32; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for t in triangles {
        let [a, b, c] = t.map(|i| vertices[i as usize]);
        // Cross product length is twice the area: area weighting for free.
        let n = (b - a).cross(&(c - a));
        for &i in t {
            acc[i as usize] += n;
        }
    }
    acc.into_iter()
        .map(|n| n.try_normalize(0.0).unwrap_or(Vec3::zeros()))
        .collect()
}

fn parse_index(tok: &str, len: usize, line: usize) -> Result<Option<u32>> {
    if tok.is_empty() {
        return Ok(None);
    }
    let v: i64 = tok.parse().map_err(|_| Error::Obj {
        line,
        message: format!("bad index `{tok}`"),
    })?;
    let idx = if v > 0 {
        v - 1
    } else if v < 0 {
        len as i64 + v
    } else {
        -1
    };
    if idx < 0 || idx >= len as i64 {
        return Err(Error::Obj {
            line,
            message: format!("index {v} out of range (have {len})"),
        });
    }
    Ok(Some(idx as u32))
}

pub fn parse_obj(text: &str) -> Result<MeshInstance> {
    let mut vertices = Vec::new();
    let mut vn = Vec::new();
    let mut triangles = Vec::new();
    let mut normal_of: Vec<Option<u32>> = Vec::new();
    let mut any_normals = false;
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tok = content.split_whitespace();
        let floats = |tok: std::str::SplitWhitespace| -> Result<Vec3> {
            let v: Vec<f64> = tok
                .take(3)
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Obj {
                    line,
                    message: e.to_string(),
                })?;
            if v.len() < 3 {
                return Err(Error::Obj {
                    line,
                    message: "expected 3 coordinates".into(),
                });
            }
            Ok(Vec3::new(v[0], v[1], v[2]))
        };
        match tok.next() {
            Some("v") => {
                vertices.push(floats(tok)?);
                normal_of.push(None);
            }
            Some("vn") => vn.push(floats(tok)?),
            Some("f") => {
                let mut corners = Vec::new();
                for c in tok {
                    let mut parts = c.split('/');
                    let v = parse_index(parts.next().unwrap_or(""), vertices.len(), line)?.ok_or(
                        Error::Obj {
                            line,
                            message: "face corner without vertex".into(),
                        },
                    )?;
                    let _tex = parts.next();
                    if let Some(n) = parts.next() {
                        if let Some(n) = parse_index(n, vn.len(), line)? {
                            normal_of[v as usize] = Some(n);
                            any_normals = true;
                        }
                    }
                    corners.push(v);
                }
                if corners.len() < 3 {
                    return Err(Error::Obj {
                        line,
                        message: format!("face with {} vertices", corners.len()),
                    });
                }
                for k in 1..corners.len() - 1 {
                    triangles.push([corners[0], corners[k], corners[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let normals = if any_normals && normal_of.iter().all(Option::is_some) {
        Some(normal_of.iter().map(|n| vn[n.unwrap() as usize]).collect())
    } else {
        None
    };
    MeshInstance::new(vertices, triangles, normals)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<MeshInstance> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshHit {
    pub t: f64,
    pub normal: Vec3,
    pub color: [f64; 3],
    pub seg_label: u8,
    pub intensity: f64,
    pub instance: usize,
    pub triangle: usize,
}

const MT_EPS: f64 = 1e-12;

/// Möller–Trumbore; returns `(t, u, v)` with barycentrics `(1-u-v, u, v)`.
pub fn ray_triangle(ray: &Ray, tri: &[Vec3; 3]) -> Option<(f64, f64, f64)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = ray.direction.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < MT_EPS * e1.norm() * e2.norm() {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = ray.direction.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t >= ray.t_min && t <= ray.t_max).then_some((t, u, v))
}

/// Nearest triangle hit over all instances within the ray interval. Ties go
/// to the lower instance, then triangle index.
pub fn ray_hit_meshes(instances: &[MeshInstance], ray: &Ray) -> Option<MeshHit> {
    let mut best: Option<MeshHit> = None;
    for (m, inst) in instances.iter().enumerate() {
        if !inst.ray_hits_bounds(ray) {
            continue;
        }
        for t in 0..inst.triangles.len() {
            let Some((th, u, v)) = ray_triangle(ray, &inst.world_triangle(t)) else {
                continue;
            };
            if best.is_some_and(|b| b.t <= th) {
                continue;
            }
            best = Some(MeshHit {
                t: th,
                normal: inst.shading_normal(t, [1.0 - u - v, u, v]),
                color: inst.triangle_color(t),
                seg_label: inst.seg_label,
                intensity: inst.lidar_intensity,
                instance: m,
                triangle: t,
            });
        }
    }
    best
}

/// Single directional light plus constant ambient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LightingSettings {
    /// Direction the light travels, world space.
    pub direction: [f64; 3],
    pub ambient: f64,
    pub diffuse: f64,
}

impl Default for LightingSettings {
    fn default() -> Self {
        Self {
            direction: [0.3, 1.0, 0.4],
            ambient: 0.3,
            diffuse: 0.7,
        }
    }
}

impl LightingSettings {
    /// Lambertian shading; `normal` must face the viewer.
    pub fn shade(&self, base: [f64; 3], normal: &Vec3) -> [f64; 3] {
        let l = -Vec3::from(self.direction).try_normalize(0.0).unwrap_or(Vec3::zeros());
        let k = self.ambient + self.diffuse * normal.dot(&l).max(0.0);
        base.map(|c| c * k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshBuffers {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub normal: Vec<[f64; 3]>,
    pub seg_id: Vec<u8>,
    pub intensity: Vec<f64>,
    pub mask: Vec<bool>,
}

impl MeshBuffers {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            rgb: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            normal: vec![[0.0; 3]; n],
            seg_id: vec![NO_HIT; n],
            intensity: vec![0.0; n],
            mask: vec![false; n],
        }
    }
}

/// Per-pixel z-buffer entry.
#[derive(Clone, Copy)]
struct Frag {
    t: f64,
    instance: usize,
    triangle: usize,
}

/// Clips a polygon (face-frame coordinates) to `z >= z_min`.
fn clip_near(poly: &[Vec3], z_min: f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ia, ib) = (a.z >= z_min, b.z >= z_min);
        if ia {
            out.push(a);
        }
        if ia != ib {
            let s = (z_min - a.z) / (b.z - a.z);
            out.push(a + (b - a) * s);
        }
    }
    out
}

/// Whether `p` lies in the convex polygon (either winding), edges included.
fn in_convex(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let e = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let scale = ((b[0] - a[0]).abs() + (b[1] - a[1]).abs()) * 1e-12;
        if e.abs() <= scale {
            continue;
        }
        if sign == 0.0 {
            sign = e.signum();
        } else if e.signum() != sign {
            return false;
        }
    }
    true
}

/// Z-buffered triangle rasterization evaluated at each output pixel's exact
/// sample position in its binning face. Depth is distance along the pixel
/// ray.
pub fn rasterize_meshes(
    instances: &[MeshInstance],
    cam: &CameraModel,
    lighting: &LightingSettings,
    settings: &RenderSettings,
) -> Result<MeshBuffers> {
    let cam = cam.clone().with_clip(settings.near, settings.far);
    cam.validate()?;
    let mut out = MeshBuffers::new(cam.width, cam.height);
    if instances.is_empty() {
        return Ok(out);
    }
    let view = RasterView::new(&cam, settings);
    let ts = settings.tile_size as f64;
    let cam_from_world = cam.pose.rotation.inverse().to_rotation_matrix().into_inner();

    let frags: Vec<Vec<(usize, Frag)>> = view
        .faces
        .par_iter()
        .enumerate()
        .map(|(fi, face)| {
            let tiles_x = face.width.div_ceil(settings.tile_size) as usize;
            let tiles_y = face.height.div_ceil(settings.tile_size) as usize;
            let mut tile_pixels: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
            for (idx, s) in view.samples.iter().enumerate() {
                if s.face as usize == fi {
                    let tx = ((s.px[0] / ts) as usize).min(tiles_x - 1);
                    let ty = ((s.px[1] / ts) as usize).min(tiles_y - 1);
                    tile_pixels[ty * tiles_x + tx].push(idx);
                }
            }
            let world_to_face = face.camera_from_face.transpose() * cam_from_world;
            let mut zbuf: std::collections::BTreeMap<usize, Frag> = Default::default();
            for (m, inst) in instances.iter().enumerate() {
                for t in 0..inst.triangles.len() {
                    let tri = inst.world_triangle(t);
                    let local: Vec<Vec3> = tri.iter().map(|v| world_to_face * (v - cam.origin())).collect();
                    let poly = clip_near(&local, 1e-6);
                    if poly.len() < 3 {
                        continue;
                    }
                    let proj: Vec<[f64; 2]> = poly
                        .iter()
                        .map(|p| [face.fx * p.x / p.z + face.cx, face.fy * p.y / p.z + face.cy])
                        .collect();
                    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
                    for p in &proj {
                        for k in 0..2 {
                            lo[k] = lo[k].min(p[k]);
                            hi[k] = hi[k].max(p[k]);
                        }
                    }
                    if hi[0] < 0.0 || hi[1] < 0.0 || lo[0] > face.width as f64 || lo[1] > face.height as f64 {
                        continue;
                    }
                    let tx0 = (lo[0].max(0.0) / ts) as usize;
                    let ty0 = (lo[1].max(0.0) / ts) as usize;
                    let tx1 = ((hi[0].max(0.0) / ts) as usize).min(tiles_x - 1);
                    let ty1 = ((hi[1].max(0.0) / ts) as usize).min(tiles_y - 1);
                    let plane_n = (tri[1] - tri[0]).cross(&(tri[2] - tri[0]));
                    for ty in ty0..=ty1.max(ty0).min(tiles_y - 1) {
                        for tx in tx0.min(tiles_x - 1)..=tx1 {
                            for &idx in &tile_pixels[ty * tiles_x + tx] {
                                let s = view.samples[idx].px;
                                if s[0] < lo[0] || s[0] > hi[0] || s[1] < lo[1] || s[1] > hi[1] {
                                    continue;
                                }
                                if !in_convex(&proj, s) {
                                    continue;
                                }
                                let ray = cam.pixel_center_ray(
                                    (idx % cam.width as usize) as u32,
                                    (idx / cam.width as usize) as u32,
                                );
                                let denom = plane_n.dot(&ray.direction);
                                if denom == 0.0 {
                                    continue;
                                }
                                let th = plane_n.dot(&(tri[0] - ray.origin)) / denom;
                                if !(th >= ray.t_min && th <= ray.t_max) {
                                    continue;
                                }
                                let e = zbuf.entry(idx).or_insert(Frag {
                                    t: f64::INFINITY,
                                    instance: usize::MAX,
                                    triangle: usize::MAX,
                                });
                                if th < e.t {
                                    *e = Frag {
                                        t: th,
                                        instance: m,
                                        triangle: t,
                                    };
                                }
                            }
                        }
                    }
                }
            }
            zbuf.into_iter().collect()
        })
        .collect();

    for (idx, f) in frags.into_iter().flatten() {
        let inst = &instances[f.instance];
        let ray = cam.pixel_center_ray((idx % cam.width as usize) as u32, (idx / cam.width as usize) as u32);
        let tri = inst.world_triangle(f.triangle);
        let hit = ray.at(f.t);
        let bary = barycentric(&tri, &hit);
        let mut n = inst.shading_normal(f.triangle, bary);
        if n.dot(&ray.direction) > 0.0 {
            n = -n;
        }
        out.rgb[idx] = lighting.shade(inst.triangle_color(f.triangle), &n);
        out.depth[idx] = f.t;
        out.normal[idx] = n.into();
        out.seg_id[idx] = inst.seg_label;
        out.intensity[idx] = inst.lidar_intensity;
        out.mask[idx] = true;
    }
    Ok(out)
}

fn barycentric(tri: &[Vec3; 3], p: &Vec3) -> [f64; 3] {
    let v0 = tri[1] - tri[0];
    let v1 = tri[2] - tri[0];
    let v2 = p - tri[0];
    let (d00, d01, d11) = (v0.dot(&v0), v0.dot(&v1), v1.dot(&v1));
    let (d20, d21) = (v2.dot(&v0), v2.dot(&v1));
    let den = d00 * d11 - d01 * d01;
    if den == 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let v = (d11 * d20 - d01 * d21) / den;
    let w = (d00 * d21 - d01 * d20) / den;
    [1.0 - v - w, v, w]
}

pub const DEFAULT_OCCL_ALPHA_MIN: f64 = 0.5;

/// Whether the mesh sample wins a pixel under the threshold rule.
pub fn mesh_wins(mesh_mask: bool, mesh_depth: f64, splat_alpha: f64, splat_depth: f64, occl_alpha_min: f64) -> bool {
    mesh_mask && (splat_alpha < occl_alpha_min || mesh_depth < splat_depth)
}

/// Per-pixel depth-tested merge of finalized splat buffers and mesh buffers.
pub fn composite_hybrid(splat: &FrameBuffers, mesh: &MeshBuffers, occl_alpha_min: f64) -> Result<FrameBuffers> {
    if (splat.width, splat.height) != (mesh.width, mesh.height) {
        return Err(Error::DimensionMismatch {
            expected: (splat.width as usize, splat.height as usize),
            actual: (mesh.width as usize, mesh.height as usize),
        });
    }
    let mut out = splat.clone();
    for i in 0..out.len() {
        if mesh_wins(mesh.mask[i], mesh.depth[i], splat.alpha[i], splat.depth[i], occl_alpha_min) {
            out.rgb[i] = mesh.rgb[i];
            out.depth[i] = mesh.depth[i];
            out.normal[i] = mesh.normal[i];
            out.seg_id[i] = mesh.seg_id[i];
            out.intensity[i] = mesh.intensity[i];
            out.seg_features[i] = encode_seg_bits(mesh.seg_id[i]).unwrap_or([0.0; 6]);
            out.alpha[i] = 1.0;
        }
    }
    Ok(out)
}

/// Scenario file entry.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScenarioEntry {
    pub obj_path: String,
    #[serde(default)]
    pub pose: ScaledPoseJson,
    #[serde(default = "default_color")]
    pub color: [f64; 3],
    #[serde(default)]
    pub seg_label: u8,
    #[serde(default = "default_intensity")]
    pub lidar_intensity: f64,
}

fn default_color() -> [f64; 3] {
    [0.7; 3]
}

fn default_intensity() -> f64 {
    0.5
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScaledPoseJson {
    #[serde(default, alias = "translation")]
    pub t: [f64; 3],
    #[serde(default = "identity_q", alias = "quaternion")]
    pub q: [f64; 4],
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn identity_q() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for ScaledPoseJson {
    fn default() -> Self {
        Self {
            t: [0.0; 3],
            q: identity_q(),
            scale: 1.0,
        }
    }
}

impl From<&ScaledPoseJson> for Similarity {
    fn from(p: &ScaledPoseJson) -> Self {
        Similarity {
            rotation: quat_wxyz(p.q),
            translation: Vec3::from(p.t),
            scale: p.scale,
        }
    }
}

/// Loads every OBJ of a scenario file; relative paths resolve against the
/// scenario's directory.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Vec<MeshInstance>> {
    let path = path.as_ref();
    let entries: Vec<ScenarioEntry> = crate::settings::read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .iter()
        .map(|e| {
            let obj = base.join(&e.obj_path);
            load_obj(&obj)?
                .with_pose(Similarity::from(&e.pose))?
                .with_color(MeshColor::Uniform(e.color))
                .with_label(e.seg_label, e.lidar_intensity)
        })
        .collect()
}
