//! Software ray-tracing backend: a median-split BVH over proxy-ellipsoid
//! AABBs, traversed in chunks that fill a fixed-size hit buffer.
//!
//! Each chunk collects the `k` nearest contributions strictly after the
//! last composited one (ordered by peak distance, then index), composites
//! them, and restarts. The result equals compositing all contributions in
//! global order, whatever `k` is.

use std::cmp::Ordering;

use crate::buffers::FrameBuffers;
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::kernel::{contribution_order, Accumulator, CompositeResult, Contribution, PreparedScene, Ray};
use crate::math::Vec3;
use crate::mesh::{LightingSettings, MeshHit, MeshInstance};
use crate::modality::encode_seg_bits;
use crate::scene::SplatScene;
use crate::settings::RenderSettings;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&o.min),
            max: self.max.sup(&o.max),
        }
    }

    pub fn contains(&self, o: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= o.min[i] && o.max[i] <= self.max[i])
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Entry and exit distances of the ray clipped to `[t_min, t_max]`.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (ray.t_min, ray.t_max);
        for i in 0..3 {
            let d = ray.direction[i];
            let o = ray.origin[i];
            if d == 0.0 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut a = (self.min[i] - o) * inv;
            let mut b = (self.max[i] - o) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Leaf { start: u32, count: u32 },
    Inner { left: u32, right: u32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BvhNode {
    pub bounds: Aabb,
    pub kind: NodeKind,
}

#[derive(Clone, Debug)]
pub struct Bvh {
    pub nodes: Vec<BvhNode>,
    /// Gaussian indices, reordered so every leaf owns a contiguous range.
    pub indices: Vec<u32>,
    /// Per-Gaussian proxy AABB, by original index.
    pub item_bounds: Vec<Aabb>,
    pub leaf_max: usize,
}

/// Relative padding keeping AABB tests conservative under rounding.
const AABB_PAD: f64 = 1e-9;

pub fn proxy_aabbs(prepared: &PreparedScene) -> Vec<Aabb> {
    prepared
        .gaussians
        .iter()
        .map(|g| {
            let h = g.aabb_half_extent();
            let pad = h.map(|v| v * AABB_PAD) + Vec3::repeat(AABB_PAD * (1.0 + g.mean.amax()));
            Aabb {
                min: g.mean - h - pad,
                max: g.mean + h + pad,
            }
        })
        .collect()
}

impl Bvh {
    pub fn build(prepared: &PreparedScene, leaf_max: usize) -> Result<Self> {
        if prepared.is_empty() {
            return Err(Error::EmptyScene);
        }
        let leaf_max = leaf_max.max(1);
        let item_bounds = proxy_aabbs(prepared);
        let centers: Vec<Vec3> = item_bounds.iter().map(Aabb::center).collect();
        let mut indices: Vec<u32> = (0..prepared.len() as u32).collect();
        let mut nodes = Vec::new();
        build_node(&mut nodes, &mut indices, 0, &item_bounds, &centers, leaf_max);
        Ok(Self {
            nodes,
            indices,
            item_bounds,
            leaf_max,
        })
    }

    pub fn depth(&self) -> usize {
        fn go(b: &Bvh, n: usize) -> usize {
            match b.nodes[n].kind {
                NodeKind::Leaf { .. } => 1,
                NodeKind::Inner { left, right } => 1 + go(b, left as usize).max(go(b, right as usize)),
            }
        }
        go(self, 0)
    }

    /// Leaves whose bounds the ray enters, in traversal order.
    pub fn visited_items(&self, ray: &Ray) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if node.bounds.intersect(ray).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    out.extend_from_slice(&self.indices[start as usize..(start + count) as usize])
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        out
    }
}

fn build_node(
    nodes: &mut Vec<BvhNode>,
    indices: &mut [u32],
    offset: usize,
    bounds: &[Aabb],
    centers: &[Vec3],
    leaf_max: usize,
) -> u32 {
    let node_bounds = indices
        .iter()
        .fold(Aabb::empty(), |acc, &i| acc.union(&bounds[i as usize]));
    let id = nodes.len() as u32;
    nodes.push(BvhNode {
        bounds: node_bounds,
        kind: NodeKind::Leaf {
            start: offset as u32,
            count: indices.len() as u32,
        },
    });
    if indices.len() <= leaf_max {
        return id;
    }
    let (lo, hi) = indices.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), &i| (lo.inf(&centers[i as usize]), hi.sup(&centers[i as usize])),
    );
    let axis = (hi - lo).imax();
    indices.sort_by(|&a, &b| {
        centers[a as usize][axis]
            .total_cmp(&centers[b as usize][axis])
            .then(a.cmp(&b))
    });
    let mid = indices.len() / 2;
    let (l, r) = indices.split_at_mut(mid);
    let left = build_node(nodes, l, offset, bounds, centers, leaf_max);
    let right = build_node(nodes, r, offset + mid, bounds, centers, leaf_max);
    nodes[id as usize].kind = NodeKind::Inner { left, right };
    id
}

pub fn build_bvh(scene: &SplatScene, settings: &RenderSettings) -> Result<(Bvh, PreparedScene)> {
    scene.ensure_renderable()?;
    let prepared = PreparedScene::new(scene, settings.into());
    let bvh = Bvh::build(&prepared, settings.bvh_leaf_max)?;
    Ok((bvh, prepared))
}

/// Fixed-capacity buffer of the nearest contributions, kept sorted.
#[derive(Clone, Debug)]
pub struct HitBuffer {
    capacity: usize,
    entries: Vec<Contribution>,
}

impl HitBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
        }
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn last(&self) -> Option<&Contribution> {
        self.entries.last()
    }

    pub fn entries(&self) -> &[Contribution] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, c: Contribution) {
        if self.is_full() && contribution_order(&c, self.entries.last().unwrap()) != Ordering::Less {
            return;
        }
        let pos = self
            .entries
            .partition_point(|e| contribution_order(e, &c) == Ordering::Less);
        self.entries.insert(pos, c);
        self.entries.truncate(self.capacity);
    }
}

/// Composites every splat contribution along the ray, stopping at
/// `stop_t` (exclusive) if given.
fn trace_splats(
    bvh: &Bvh,
    prepared: &PreparedScene,
    ray: &Ray,
    k: usize,
    stop_t: Option<f64>,
    acc: &mut Accumulator,
) {
    let mut cursor: Option<Contribution> = None;
    let mut stack: Vec<u32> = Vec::with_capacity(64);
    loop {
        let mut buffer = HitBuffer::new(k);
        stack.clear();
        stack.push(0);
        while let Some(n) = stack.pop() {
            let node = &bvh.nodes[n as usize];
            let Some((t_in, t_out)) = node.bounds.intersect(ray) else {
                continue;
            };
            if let Some(c) = &cursor {
                if t_out < c.t_peak {
                    continue;
                }
            }
            if stop_t.is_some_and(|s| t_in >= s) {
                continue;
            }
            if buffer.is_full() && t_in > buffer.last().unwrap().t_peak {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &i in &bvh.indices[start as usize..(start + count) as usize] {
                        let Some(c) = prepared.response(i as usize, ray) else {
                            continue;
                        };
                        if stop_t.is_some_and(|s| c.t_peak >= s) {
                            continue;
                        }
                        if let Some(cur) = &cursor {
                            if contribution_order(&c, cur) != Ordering::Greater {
                                continue;
                            }
                        }
                        buffer.insert(c);
                    }
                }
                NodeKind::Inner { left, right } => {
                    let tl = bvh.nodes[left as usize].bounds.intersect(ray).map(|t| t.0);
                    let tr = bvh.nodes[right as usize].bounds.intersect(ray).map(|t| t.0);
                    // Push the farther child first so the nearer is visited first.
                    let left_first = match (tl, tr) {
                        (Some(a), Some(b)) => a <= b,
                        (Some(_), None) => true,
                        _ => false,
                    };
                    if left_first {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        for c in buffer.entries() {
            if !acc.add(c, prepared, ray) {
                return;
            }
        }
        if !buffer.is_full() {
            return;
        }
        cursor = buffer.last().copied();
    }
}

pub fn trace_ray(bvh: &Bvh, prepared: &PreparedScene, ray: &Ray, k: usize) -> CompositeResult {
    let mut acc = Accumulator::new(prepared.params.t_term);
    trace_splats(bvh, prepared, ray, k.max(1), None, &mut acc);
    acc.finish()
}

/// Result of a hybrid trace: the composite plus the weight the mesh surface
/// received (0 when no mesh was hit or it was fully occluded).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HybridTrace {
    pub result: CompositeResult,
    pub mesh_weight: f64,
    pub mesh_hit: Option<MeshHit>,
}

/// Splat compositing with the nearest mesh hit inserted as an opaque hard
/// stop.
pub fn trace_ray_hybrid(
    bvh: &Bvh,
    prepared: &PreparedScene,
    meshes: &[MeshInstance],
    lighting: &LightingSettings,
    ray: &Ray,
    k: usize,
) -> HybridTrace {
    let hit = crate::mesh::ray_hit_meshes(meshes, ray);
    let mut acc = Accumulator::new(prepared.params.t_term);
    trace_splats(bvh, prepared, ray, k.max(1), hit.map(|h| h.t), &mut acc);
    let mut mesh_weight = 0.0;
    if let Some(h) = &hit {
        if !acc.is_done() {
            mesh_weight = acc.transmittance;
            let seg = encode_seg_bits(h.seg_label).unwrap_or([0.0; 6]);
            let mut n = h.normal;
            if n.dot(&ray.direction) > 0.0 {
                n = -n;
            }
            acc.add_layer(1.0, h.t, lighting.shade(h.color, &n), n, h.intensity, &seg);
        }
    }
    HybridTrace {
        result: acc.finish(),
        mesh_weight,
        mesh_hit: hit,
    }
}

pub fn render_rt(scene: &SplatScene, cam: &CameraModel, settings: &RenderSettings) -> Result<FrameBuffers> {
    let (prepared, cam) = crate::raster::prepare(scene, cam, settings)?;
    let bvh = Bvh::build(&prepared, settings.bvh_leaf_max)?;
    Ok(crate::raster::assemble(&cam, settings, |_, ray| {
        trace_ray(&bvh, &prepared, ray, settings.k_buffer)
    }))
}

/// Ray-traced splats with mesh actors; also returns the per-pixel mesh
/// weight.
pub fn render_rt_hybrid(
    scene: &SplatScene,
    meshes: &[MeshInstance],
    cam: &CameraModel,
    lighting: &LightingSettings,
    settings: &RenderSettings,
) -> Result<(FrameBuffers, Vec<f64>)> {
    let (prepared, cam) = crate::raster::prepare(scene, cam, settings)?;
    let bvh = Bvh::build(&prepared, settings.bvh_leaf_max)?;
    let weights: Vec<std::sync::atomic::AtomicU64> =
        (0..cam.pixel_count()).map(|_| std::sync::atomic::AtomicU64::new(0)).collect();
    let fb = crate::raster::assemble(&cam, settings, |idx, ray| {
        let h = trace_ray_hybrid(&bvh, &prepared, meshes, lighting, ray, settings.k_buffer);
        weights[idx].store(h.mesh_weight.to_bits(), std::sync::atomic::Ordering::Relaxed);
        h.result
    });
    let weights = weights.into_iter().map(|w| f64::from_bits(w.into_inner())).collect();
    Ok((fb, weights))
}
