//! Bird's-eye-view block partitioning of large scenes and render-time
//! blending across overlapping blocks.
//!
//! BEV coordinates are world `(x, y)`; world `z` is treated as up.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffers::FrameBuffers;
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::modality::{finalize_buffers, SegDecodeSettings};
use crate::raster::render_raster;
use crate::scene::SplatScene;
use crate::settings::RenderSettings;

pub type Vec2 = Vector2<f64>;

pub const UNASSIGNED: u32 = u32::MAX;
const SEED: u64 = 0x5eed_b10c;
const MAX_LLOYD_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Cluster ID per input position.
    pub labels: Vec<u32>,
    pub centers: Vec<Vec2>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn members(&self, c: u32) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == c).collect()
    }

    /// Max distance from a member to its center, per cluster.
    pub fn radii(&self, positions: &[Vec2]) -> Vec<f64> {
        let mut r = vec![0.0f64; self.k()];
        for (p, &l) in positions.iter().zip(&self.labels) {
            r[l as usize] = r[l as usize].max((p - self.centers[l as usize]).norm());
        }
        r
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.k()];
        for &l in &self.labels {
            n[l as usize] += 1;
        }
        n
    }

    pub fn satisfies(&self, positions: &[Vec2], max_radius: f64, max_images: usize) -> bool {
        self.radii(positions).iter().all(|&r| r <= max_radius) && self.counts().iter().all(|&n| n <= max_images)
    }
}

fn nearest_center(p: &Vec2, centers: &[Vec2]) -> u32 {
    let mut best = (f64::INFINITY, 0u32);
    for (c, q) in centers.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.0 {
            best = (d, c as u32);
        }
    }
    best.1
}

fn seed_centers(positions: &[Vec2], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec2> {
    let n = positions.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = positions.iter().map(|p| (p - positions[chosen[0]]).norm_squared()).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut x = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && x < d {
                    pick = i;
                    break;
                }
                x -= d;
            }
            if d2[pick] == 0.0 {
                // Rounding walked off the end; take the last positive weight.
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in positions.iter().enumerate() {
            d2[i] = d2[i].min((p - positions[next]).norm_squared());
        }
    }
    chosen.into_iter().map(|i| positions[i]).collect()
}

/// Lloyd iterations from seeded centers, then canonical relabeling by the
/// first member index with empty clusters dropped.
pub fn kmeans(positions: &[Vec2], k: usize, seed: u64) -> Clustering {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(positions, k, &mut rng);
    let mut labels: Vec<u32> = positions.iter().map(|p| nearest_center(p, &centers)).collect();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sum = vec![Vec2::zeros(); k];
        let mut cnt = vec![0usize; k];
        for (p, &l) in positions.iter().zip(&labels) {
            sum[l as usize] += p;
            cnt[l as usize] += 1;
        }
        for c in 0..k {
            if cnt[c] > 0 {
                centers[c] = sum[c] / cnt[c] as f64;
            }
        }
        let next: Vec<u32> = positions.iter().map(|p| nearest_center(p, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    canonicalize(positions, &labels)
}

fn canonicalize(positions: &[Vec2], labels: &[u32]) -> Clustering {
    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    let mut order = Vec::new();
    for &l in labels {
        if let std::collections::btree_map::Entry::Vacant(e) = remap.entry(l) {
            e.insert(order.len() as u32);
            order.push(l);
        }
    }
    let labels: Vec<u32> = labels.iter().map(|l| remap[l]).collect();
    let mut sum = vec![Vec2::zeros(); order.len()];
    let mut cnt = vec![0usize; order.len()];
    for (p, &l) in positions.iter().zip(&labels) {
        sum[l as usize] += p;
        cnt[l as usize] += 1;
    }
    let centers = sum.iter().zip(&cnt).map(|(s, &n)| s / n as f64).collect();
    Clustering { labels, centers }
}

/// Grows `k` from 1 until every cluster meets both the radius and the
/// image-count limit. At `k = N` each pose is its own cluster.
pub fn cluster_poses(positions: &[Vec2], max_radius: f64, max_images: usize) -> Result<Clustering> {
    if positions.is_empty() {
        return Err(Error::Config("no poses to cluster".into()));
    }
    if !(max_radius > 0.0) || max_images == 0 {
        return Err(Error::Config("max_radius must be > 0 and max_images >= 1".into()));
    }
    if positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::Config("non-finite pose position".into()));
    }
    let n = positions.len();
    for k in 1..n {
        let c = kmeans(positions, k, SEED ^ k as u64);
        if c.satisfies(positions, max_radius, max_images) {
            return Ok(c);
        }
    }
    Ok(canonicalize(positions, &(0..n as u32).collect::<Vec<_>>()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    /// Bounding box of `positions` padded by `margin` on every side.
    pub fn around(positions: &[Vec2], cell_size: f64, margin: f64) -> Result<Self> {
        if !(cell_size > 0.0) || !(margin >= 0.0) {
            return Err(Error::Config("cell_size must be > 0 and margin >= 0".into()));
        }
        let (mut lo, mut hi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
        for p in positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if positions.is_empty() {
            return Err(Error::Config("no positions".into()));
        }
        let lo = lo - Vec2::repeat(margin);
        let hi = hi + Vec2::repeat(margin);
        let width = (((hi.x - lo.x) / cell_size).floor() as usize + 1).max(1);
        let height = (((hi.y - lo.y) / cell_size).floor() as usize + 1).max(1);
        if width.saturating_mul(height) > 1 << 26 {
            return Err(Error::Config(format!("BEV raster of {width}x{height} cells is too large")));
        }
        Ok(Self {
            origin: [lo.x, lo.y],
            cell_size,
            width,
            height,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_xy(&self, p: &Vec2) -> Option<(usize, usize)> {
        let fx = ((p.x - self.origin[0]) / self.cell_size).floor();
        let fy = ((p.y - self.origin[1]) / self.cell_size).floor();
        (fx >= 0.0 && fy >= 0.0 && (fx as usize) < self.width && (fy as usize) < self.height)
            .then_some((fx as usize, fy as usize))
    }

    pub fn cell_of(&self, p: &Vec2) -> Option<usize> {
        self.cell_xy(p).map(|(x, y)| y * self.width + x)
    }

    pub fn clamped_cell(&self, p: &Vec2) -> usize {
        let fx = ((p.x - self.origin[0]) / self.cell_size).floor().clamp(0.0, (self.width - 1) as f64);
        let fy = ((p.y - self.origin[1]) / self.cell_size).floor().clamp(0.0, (self.height - 1) as f64);
        fy as usize * self.width + fx as usize
    }

    pub fn cell_center(&self, idx: usize) -> Vec2 {
        let (x, y) = (idx % self.width, idx / self.width);
        Vec2::new(
            self.origin[0] + (x as f64 + 0.5) * self.cell_size,
            self.origin[1] + (y as f64 + 0.5) * self.cell_size,
        )
    }

    fn cell_bounds(&self, idx: usize) -> (Vec2, Vec2) {
        let c = self.cell_center(idx);
        let h = Vec2::repeat(0.5 * self.cell_size);
        (c - h, c + h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BevRaster {
    pub grid: GridSpec,
    pub owner: Vec<u32>,
    /// Per-cell block membership bitset, `words` u64 per cell; empty until
    /// dilation.
    pub membership: Vec<u64>,
    pub words: usize,
}

impl BevRaster {
    pub fn unassigned_count(&self) -> usize {
        self.owner.iter().filter(|&&o| o == UNASSIGNED).count()
    }

    pub fn is_member(&self, cell: usize, block: u32) -> bool {
        self.words > 0 && self.membership[cell * self.words + block as usize / 64] >> (block % 64) & 1 == 1
    }

    pub fn memberships(&self, cell: usize) -> Vec<u32> {
        (0..(self.words * 64) as u32).filter(|&b| self.is_member(cell, b)).collect()
    }
}

/// Majority owner per cell containing poses; ties go to the lower cluster.
pub fn assign_raster(positions: &[Vec2], clusters: &Clustering, grid: GridSpec) -> BevRaster {
    let mut votes: BTreeMap<usize, BTreeMap<u32, usize>> = BTreeMap::new();
    for (p, &l) in positions.iter().zip(&clusters.labels) {
        if let Some(c) = grid.cell_of(p) {
            *votes.entry(c).or_default().entry(l).or_default() += 1;
        }
    }
    let mut owner = vec![UNASSIGNED; grid.len()];
    for (cell, v) in votes {
        // BTreeMap iterates in ascending cluster ID; strict > keeps the lower on ties.
        let mut best = (0usize, UNASSIGNED);
        for (l, n) in v {
            if n > best.0 {
                best = (n, l);
            }
        }
        owner[cell] = best.1;
    }
    BevRaster {
        grid,
        owner,
        membership: Vec::new(),
        words: 0,
    }
}

fn cross(o: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull, counter-clockwise, without collinear points. Degenerate
/// inputs return one point or the two extreme points of a segment.
pub fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut hull: Vec<Vec2> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vec2>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    if hull.len() < 3 {
        // All collinear: the chain collapses to the two extremes.
        return vec![pts[0], pts[pts.len() - 1]];
    }
    hull
}

/// Closed point-in-convex-polygon test for a CCW polygon.
pub fn in_convex_polygon(poly: &[Vec2], p: &Vec2) -> bool {
    let scale = poly.iter().map(|q| q.abs().max()).fold(1.0, f64::max);
    (0..poly.len()).all(|i| cross(&poly[i], &poly[(i + 1) % poly.len()], p) >= -1e-12 * scale * scale)
}

/// Whether the closed segment `a..b` touches the closed box.
fn segment_hits_box(a: &Vec2, b: &Vec2, lo: &Vec2, hi: &Vec2) -> bool {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let d = b - a;
    for k in 0..2 {
        if d[k] == 0.0 {
            if a[k] < lo[k] || a[k] > hi[k] {
                return false;
            }
        } else {
            let (mut u, mut v) = ((lo[k] - a[k]) / d[k], (hi[k] - a[k]) / d[k]);
            if u > v {
                std::mem::swap(&mut u, &mut v);
            }
            t0 = t0.max(u);
            t1 = t1.min(v);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

fn hull_covers(hull: &[Vec2], grid: &GridSpec, cell: usize) -> bool {
    match hull.len() {
        0 => false,
        1 => grid.cell_of(&hull[0]) == Some(cell),
        2 => {
            let (lo, hi) = grid.cell_bounds(cell);
            segment_hits_box(&hull[0], &hull[1], &lo, &hi)
        }
        _ => in_convex_polygon(hull, &grid.cell_center(cell)),
    }
}

/// Exact squared Euclidean distance transform (in cells) to the nearest
/// `true` cell, with that cell's index. Cells with no feature anywhere get
/// `INFINITY` and `usize::MAX`.
pub fn distance_transform(mask: &[bool], width: usize, height: usize) -> (Vec<f64>, Vec<usize>) {
    fn pass(f: &[f64], d: &mut [f64], arg: &mut [usize]) {
        let n = f.len();
        let mut v = vec![0usize; n];
        let mut z = vec![0.0f64; n + 1];
        let mut k = 0usize;
        let first = match (0..n).find(|&q| f[q].is_finite()) {
            Some(q) => q,
            None => {
                d.fill(f64::INFINITY);
                arg.fill(usize::MAX);
                return;
            }
        };
        v[0] = first;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in first + 1..n {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[k] && k > 0 {
                    k -= 1;
                    continue;
                }
                if s <= z[k] {
                    // k == 0 and the new parabola dominates everywhere.
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
        k = 0;
        for q in 0..n {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            d[q] = (q as f64 - p as f64).powi(2) + f[p];
            arg[q] = p;
        }
    }

    let n = width * height;
    let mut col_d = vec![f64::INFINITY; n];
    let mut col_arg = vec![usize::MAX; n];
    let mut f = vec![0.0; height];
    let mut d = vec![0.0; height];
    let mut a = vec![0usize; height];
    for x in 0..width {
        for y in 0..height {
            f[y] = if mask[y * width + x] { 0.0 } else { f64::INFINITY };
        }
        pass(&f, &mut d, &mut a);
        for y in 0..height {
            col_d[y * width + x] = d[y];
            col_arg[y * width + x] = a[y];
        }
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut near = vec![usize::MAX; n];
    let mut f = vec![0.0; width];
    let mut d = vec![0.0; width];
    let mut a = vec![0usize; width];
    for y in 0..height {
        f.copy_from_slice(&col_d[y * width..(y + 1) * width]);
        pass(&f, &mut d, &mut a);
        for x in 0..width {
            let i = y * width + x;
            dist[i] = d[x];
            if d[x].is_finite() {
                let sx = a[x];
                near[i] = col_arg[y * width + sx] * width + sx;
            }
        }
    }
    (dist, near)
}

/// Hull expansion followed by nearest-owned-cell fill. Cells owned by the
/// majority step keep their owner.
pub fn expand_and_fill(raster: &BevRaster, positions: &[Vec2], clusters: &Clustering) -> BevRaster {
    let grid = &raster.grid;
    let hulls: Vec<Vec<Vec2>> = (0..clusters.k() as u32)
        .map(|c| convex_hull(&clusters.members(c).iter().map(|&i| positions[i]).collect::<Vec<_>>()))
        .collect();
    let mut owner = raster.owner.clone();
    for cell in 0..grid.len() {
        if owner[cell] != UNASSIGNED {
            continue;
        }
        let center = grid.cell_center(cell);
        let mut best = (f64::INFINITY, UNASSIGNED);
        for (c, hull) in hulls.iter().enumerate() {
            if hull_covers(hull, grid, cell) {
                let d = (center - clusters.centers[c]).norm_squared();
                if d < best.0 {
                    best = (d, c as u32);
                }
            }
        }
        owner[cell] = best.1;
    }
    let mask: Vec<bool> = owner.iter().map(|&o| o != UNASSIGNED).collect();
    if mask.iter().any(|&m| m) {
        let (_, near) = distance_transform(&mask, grid.width, grid.height);
        for cell in 0..grid.len() {
            if owner[cell] == UNASSIGNED {
                owner[cell] = owner[near[cell]];
            }
        }
    }
    BevRaster {
        grid: grid.clone(),
        owner,
        membership: Vec::new(),
        words: 0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub id: u32,
    pub hull: Vec<Vec2>,
    pub cells: Vec<bool>,
    pub members: Vec<usize>,
    pub scene_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSet {
    pub raster: BevRaster,
    pub blocks: Vec<Block>,
}

fn dilate(mask: &[bool], width: usize, height: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let mut rows = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                for xx in x.saturating_sub(r)..=(x + r).min(width - 1) {
                    rows[y * width + xx] = true;
                }
            }
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if rows[y * width + x] {
                for yy in y.saturating_sub(r)..=(y + r).min(height - 1) {
                    out[yy * width + x] = true;
                }
            }
        }
    }
    out
}

/// Dilates every owned region by `overlap_cells` (square, 8-connected
/// structuring element) and records memberships.
pub fn dilate_blocks(raster: &BevRaster, positions: &[Vec2], clusters: &Clustering, overlap_cells: usize) -> BlockSet {
    let grid = &raster.grid;
    let k = clusters.k();
    let words = k.div_ceil(64).max(1);
    let mut membership = vec![0u64; grid.len() * words];
    let blocks: Vec<Block> = (0..k as u32)
        .map(|c| {
            let owned: Vec<bool> = raster.owner.iter().map(|&o| o == c).collect();
            let cells = dilate(&owned, grid.width, grid.height, overlap_cells);
            let members = clusters.members(c);
            Block {
                id: c,
                hull: convex_hull(&members.iter().map(|&i| positions[i]).collect::<Vec<_>>()),
                cells,
                members,
                scene_path: None,
            }
        })
        .collect();
    for b in &blocks {
        for (cell, _) in b.cells.iter().enumerate().filter(|(_, &m)| m) {
            membership[cell * words + b.id as usize / 64] |= 1 << (b.id % 64);
        }
    }
    BlockSet {
        raster: BevRaster {
            grid: grid.clone(),
            owner: raster.owner.clone(),
            membership,
            words,
        },
        blocks,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub max_radius: f64,
    pub max_images: usize,
    pub cell_size: f64,
    pub overlap_m: f64,
    /// Padding around the pose bounding box; defaults to `max_radius`.
    #[serde(default)]
    pub margin_m: Option<f64>,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) {
            return Err(Error::Config("cell_size must be > 0".into()));
        }
        if !(self.max_radius > 0.0) || self.max_images == 0 {
            return Err(Error::Config("max_radius must be > 0 and max_images >= 1".into()));
        }
        if !(self.overlap_m >= 0.0) {
            return Err(Error::Config("overlap must be >= 0".into()));
        }
        Ok(())
    }

    pub fn overlap_cells(&self) -> usize {
        (self.overlap_m / self.cell_size).ceil() as usize
    }
}

/// Full pipeline: cluster, rasterize, expand, fill and dilate.
pub fn partition(positions: &[Vec2], cfg: &PartitionConfig) -> Result<(Clustering, BlockSet)> {
    cfg.validate()?;
    let clusters = cluster_poses(positions, cfg.max_radius, cfg.max_images)?;
    let grid = GridSpec::around(positions, cfg.cell_size, cfg.margin_m.unwrap_or(cfg.max_radius))?;
    let raster = assign_raster(positions, &clusters, grid);
    let filled = expand_and_fill(&raster, positions, &clusters);
    let blocks = dilate_blocks(&filled, positions, &clusters, cfg.overlap_cells());
    Ok((clusters, blocks))
}

impl BlockSet {
    pub fn block(&self, id: u32) -> Option<&Block> {
        self.blocks.iter().find(|b| b.id == id)
    }

    /// Distance from `q` to the union of cells outside `block`. Cells beyond
    /// the raster count as inside. `INFINITY` when the block covers
    /// everything.
    pub fn edge_distance(&self, block: &Block, q: &Vec2) -> f64 {
        let g = &self.raster.grid;
        let cs = g.cell_size;
        let fx = (q.x - g.origin[0]) / cs;
        let fy = (q.y - g.origin[1]) / cs;
        let mut best = f64::INFINITY;
        let max_r = g.width.max(g.height) as i64;
        let (cx, cy) = (fx.floor() as i64, fy.floor() as i64);
        let mut r = 0i64;
        // Ring search; a ring at Chebyshev radius r is at least (r-1)·cs away.
        while r <= max_r + 1 {
            if ((r - 1).max(0) as f64) * cs > best {
                break;
            }
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    if (x - cx).abs() != r && (y - cy).abs() != r {
                        continue;
                    }
                    if x < 0 || y < 0 || x >= g.width as i64 || y >= g.height as i64 {
                        continue;
                    }
                    let idx = y as usize * g.width + x as usize;
                    if block.cells[idx] {
                        continue;
                    }
                    let (lo, hi) = g.cell_bounds(idx);
                    let dx = (lo.x - q.x).max(0.0).max(q.x - hi.x);
                    let dy = (lo.y - q.y).max(0.0).max(q.y - hi.y);
                    best = best.min((dx * dx + dy * dy).sqrt());
                }
            }
            r += 1;
        }
        best
    }
}

/// Blend weights at a BEV position: proportional to the distance to each
/// containing block's edge, normalized. Outside the raster the owner of the
/// nearest cell gets weight 1.
pub fn interp_weights(blocks: &BlockSet, q: &Vec2) -> Vec<(u32, f64)> {
    let g = &blocks.raster.grid;
    let Some(cell) = g.cell_of(q) else {
        return vec![(blocks.raster.owner[g.clamped_cell(q)], 1.0)];
    };
    let containing: Vec<&Block> = blocks.blocks.iter().filter(|b| b.cells[cell]).collect();
    match containing.len() {
        0 => return vec![(blocks.raster.owner[cell], 1.0)],
        1 => return vec![(containing[0].id, 1.0)],
        _ => {}
    }
    let d: Vec<f64> = containing.iter().map(|b| blocks.edge_distance(b, q)).collect();
    let inf = d.iter().filter(|x| x.is_infinite()).count();
    let raw: Vec<f64> = if inf > 0 {
        d.iter().map(|x| if x.is_infinite() { 1.0 } else { 0.0 }).collect()
    } else if d.iter().sum::<f64>() > 0.0 {
        d
    } else {
        vec![1.0; d.len()]
    };
    let total: f64 = raw.iter().sum();
    containing.iter().zip(raw).map(|(b, w)| (b.id, w / total)).collect()
}

/// Renders every positively weighted block and blends the buffers at the
/// camera's BEV position. Segmentation is decoded after blending.
pub fn render_blended(
    scenes: &BTreeMap<u32, SplatScene>,
    blocks: &BlockSet,
    cam: &CameraModel,
    settings: &RenderSettings,
) -> Result<FrameBuffers> {
    let origin = cam.origin();
    let weights: Vec<(u32, f64)> = interp_weights(blocks, &Vec2::new(origin.x, origin.y))
        .into_iter()
        .filter(|&(_, w)| w > 0.0)
        .collect();
    if let Some(&(missing, _)) = weights.iter().find(|(id, _)| !scenes.contains_key(id)) {
        return Err(Error::MissingBlockScene(missing as usize));
    }
    let renders: Vec<FrameBuffers> = weights
        .par_iter()
        .map(|(id, _)| render_raster(&scenes[id], cam, settings))
        .collect::<Result<_>>()?;
    if renders.len() == 1 {
        return Ok(renders.into_iter().next().unwrap());
    }
    let mut out = FrameBuffers::new(cam.width, cam.height);
    for (fb, (_, w)) in renders.iter().zip(&weights) {
        for i in 0..out.len() {
            for c in 0..3 {
                out.rgb[i][c] += w * fb.rgb[i][c];
                out.normal[i][c] += w * fb.normal[i][c];
            }
            out.depth[i] += w * fb.depth[i];
            out.intensity[i] += w * fb.intensity[i];
            out.alpha[i] += w * fb.alpha[i];
            for b in 0..out.seg_features[i].len() {
                out.seg_features[i][b] += w * fb.seg_features[i][b];
            }
        }
    }
    Ok(finalize_buffers(
        &out,
        &SegDecodeSettings {
            seg_alpha_min: settings.seg_alpha_min,
        },
    ))
}

/// Row-major run-length encoding of a boolean mask as `[start, len]` pairs.
pub fn rle_encode(mask: &[bool]) -> Vec<[usize; 2]> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            runs.push([start, i - start]);
        } else {
            i += 1;
        }
    }
    runs
}

pub fn rle_decode(runs: &[[usize; 2]], len: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; len];
    for &[s, n] in runs {
        if s + n > len {
            return Err(Error::Config(format!("cell run {s}+{n} exceeds {len} cells")));
        }
        mask[s..s + n].fill(true);
    }
    Ok(mask)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BlockJson {
    pub id: u32,
    pub hull: Vec<[f64; 2]>,
    pub cell_runs: Vec<[usize; 2]>,
    pub owned_runs: Vec<[usize; 2]>,
    #[serde(default)]
    pub scene: Option<String>,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BlockIndexJson {
    pub grid: GridSpec,
    pub blocks: Vec<BlockJson>,
}

impl From<&BlockSet> for BlockIndexJson {
    fn from(s: &BlockSet) -> Self {
        Self {
            grid: s.raster.grid.clone(),
            blocks: s
                .blocks
                .iter()
                .map(|b| BlockJson {
                    id: b.id,
                    hull: b.hull.iter().map(|p| [p.x, p.y]).collect(),
                    cell_runs: rle_encode(&b.cells),
                    owned_runs: rle_encode(&s.raster.owner.iter().map(|&o| o == b.id).collect::<Vec<_>>()),
                    scene: b.scene_path.clone(),
                    members: b.members.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<&BlockIndexJson> for BlockSet {
    type Error = Error;

    fn try_from(j: &BlockIndexJson) -> Result<Self> {
        let grid = j.grid.clone();
        if !(grid.cell_size > 0.0) || grid.is_empty() {
            return Err(Error::Config("block index grid is empty".into()));
        }
        let n = grid.len();
        let mut owner = vec![UNASSIGNED; n];
        let mut blocks = Vec::new();
        for b in &j.blocks {
            for (c, o) in rle_decode(&b.owned_runs, n)?.into_iter().enumerate() {
                if o {
                    owner[c] = b.id;
                }
            }
            blocks.push(Block {
                id: b.id,
                hull: b.hull.iter().map(|p| Vec2::new(p[0], p[1])).collect(),
                cells: rle_decode(&b.cell_runs, n)?,
                members: b.members.clone(),
                scene_path: b.scene.clone(),
            });
        }
        let max_id = blocks.iter().map(|b| b.id as usize).max().unwrap_or(0);
        let words = (max_id + 1).div_ceil(64);
        let mut membership = vec![0u64; n * words];
        for b in &blocks {
            for (cell, _) in b.cells.iter().enumerate().filter(|(_, &m)| m) {
                membership[cell * words + b.id as usize / 64] |= 1 << (b.id % 64);
            }
        }
        Ok(BlockSet {
            raster: BevRaster {
                grid,
                owner,
                membership,
                words,
            },
            blocks,
        })
    }
}

impl BlockSet {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::settings::write_json(path, &BlockIndexJson::from(self))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let j: BlockIndexJson = crate::settings::read_json(path)?;
        BlockSet::try_from(&j)
    }

    /// Loads each block's scene, resolving relative paths against `base`.
    pub fn load_scenes(&self, base: &Path) -> Result<BTreeMap<u32, SplatScene>> {
        let mut out = BTreeMap::new();
        for b in &self.blocks {
            if let Some(p) = &b.scene_path {
                out.insert(b.id, crate::scene::load_ply(base.join(p))?);
            }
        }
        Ok(out)
    }
}

/// Pose file entry for partitioning.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PoseEntry {
    pub id: serde_json::Value,
    pub position: [f64; 3],
    #[serde(default = "identity_q")]
    pub quaternion: [f64; 4],
}

fn identity_q() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}
