//! Closed-form maximum response of a Gaussian along a ray and front-to-back
//! compositing. Both render backends and the LiDAR simulator go through
//! this module, so their per-ray results are identical for identical
//! contribution order.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use crate::scene::{Gaussian, SplatScene, SEG_BITS};
use crate::settings::RenderSettings;
use crate::sh;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    pub t_min: f64,
    pub t_max: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_min: f64, t_max: f64) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
            t_min,
            t_max,
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub t_peak: f64,
    pub alpha: f64,
    pub gaussian_index: u32,
}

/// Compositing order: ascending peak distance, ties by index.
pub fn contribution_order(a: &Contribution, b: &Contribution) -> Ordering {
    a.t_peak
        .total_cmp(&b.t_peak)
        .then(a.gaussian_index.cmp(&b.gaussian_index))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CompositeResult {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub normal: Vec3,
    pub intensity: f64,
    pub seg_features: [f64; SEG_BITS],
    pub accumulated_alpha: f64,
}

/// Kernel thresholds extracted from [`RenderSettings`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    pub alpha_max: f64,
    pub alpha_cull: f64,
    pub t_term: f64,
    pub sigma_cut: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        (&RenderSettings::default()).into()
    }
}

impl From<&RenderSettings> for KernelParams {
    fn from(s: &RenderSettings) -> Self {
        Self {
            alpha_max: s.alpha_max,
            alpha_cull: s.alpha_cull,
            t_term: s.t_term,
            sigma_cut: s.sigma_cut,
        }
    }
}

/// Per-Gaussian data cached once per frame.
#[derive(Clone, Debug)]
pub struct PreparedGaussian {
    pub mean: Vec3,
    /// `S⁻¹ Rᵀ`: maps world offsets into the unit-sphere frame, so that
    /// `|W x|² = xᵀ Σ⁻¹ x`.
    pub whiten: Mat3,
    pub opacity: f64,
    /// Mahalanobis radius of the proxy ellipsoid; zero when the Gaussian can
    /// never reach `alpha_cull`.
    pub radius: f64,
    pub rotation: Mat3,
    pub scales: Vec3,
    pub normal: Vec3,
    pub intensity: f64,
    pub seg: [f64; SEG_BITS],
}

impl PreparedGaussian {
    pub fn new(g: &Gaussian, params: &KernelParams) -> Self {
        let rotation = g.rotation_matrix();
        let scales = g.scales();
        let inv = Mat3::from_diagonal(&scales.map(|s| 1.0 / s));
        let opacity = g.opacity();
        Self {
            mean: g.mean,
            whiten: inv * rotation.transpose(),
            opacity,
            radius: proxy_radius(opacity, params),
            rotation,
            scales,
            normal: g.normal(),
            intensity: g.intensity(),
            seg: g.seg_features(),
        }
    }

    pub fn is_culled(&self) -> bool {
        self.radius == 0.0
    }

    /// Peak distance and unclamped response along the ray.
    pub fn peak(&self, ray: &Ray) -> (f64, f64) {
        let o = self.whiten * (ray.origin - self.mean);
        let d = self.whiten * ray.direction;
        let dd = d.dot(&d);
        let t = (-o.dot(&d) / dd).clamp(ray.t_min, ray.t_max);
        let p = o + d * t;
        (t, (-0.5 * p.dot(&p)).exp())
    }

    pub fn response(&self, ray: &Ray, index: u32, params: &KernelParams) -> Option<Contribution> {
        let (t_peak, rho) = self.peak(ray);
        let alpha = (self.opacity * rho).min(params.alpha_max);
        (alpha >= params.alpha_cull).then_some(Contribution {
            t_peak,
            alpha,
            gaussian_index: index,
        })
    }

    /// World-space half extents of the proxy ellipsoid.
    pub fn aabb_half_extent(&self) -> Vec3 {
        let m = self.rotation * Mat3::from_diagonal(&self.scales);
        Vec3::from_fn(|i, _| self.radius * m.row(i).norm())
    }
}

/// Radius beyond which `opacity · ρ < alpha_cull`, floored at `sigma_cut`.
/// A small relative margin keeps bounding tests conservative under rounding.
pub fn proxy_radius(opacity: f64, params: &KernelParams) -> f64 {
    let peak = opacity.min(params.alpha_max);
    if peak < params.alpha_cull {
        return 0.0;
    }
    let exact = (2.0 * (peak / params.alpha_cull).ln()).max(0.0).sqrt();
    exact.max(params.sigma_cut) * (1.0 + 1e-6) + 1e-9
}

/// Precision cache for one frame.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub gaussians: Vec<PreparedGaussian>,
    sh: Vec<[f64; 3]>,
    sh_count: usize,
    pub params: KernelParams,
}

impl PreparedScene {
    pub fn new(scene: &SplatScene, params: KernelParams) -> Self {
        let world = scene.world_gaussians();
        let sh_count = world.iter().map(|g| g.color_sh.len()).max().unwrap_or(1).max(1);
        let mut sh = vec![[0.0; 3]; sh_count * world.len()];
        for (i, g) in world.iter().enumerate() {
            sh[i * sh_count..i * sh_count + g.color_sh.len()].copy_from_slice(&g.color_sh);
        }
        Self {
            gaussians: world.iter().map(|g| PreparedGaussian::new(g, &params)).collect(),
            sh,
            sh_count,
            params,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn color(&self, index: usize, dir: &Vec3) -> [f64; 3] {
        sh::sh_eval(&self.sh[index * self.sh_count..(index + 1) * self.sh_count], dir)
    }

    pub fn response(&self, index: usize, ray: &Ray) -> Option<Contribution> {
        self.gaussians[index].response(ray, index as u32, &self.params)
    }

    /// All contributions along the ray, sorted. Brute force over the scene.
    pub fn all_contributions(&self, ray: &Ray) -> Vec<Contribution> {
        let mut out: Vec<Contribution> = (0..self.len())
            .filter_map(|i| self.response(i, ray))
            .collect();
        out.sort_by(contribution_order);
        out
    }
}

/// Closed-form maximum response of one Gaussian along a ray.
pub fn max_response(g: &Gaussian, ray: &Ray, params: &KernelParams) -> Option<Contribution> {
    PreparedGaussian::new(g, params).response(ray, 0, params)
}

/// Running front-to-back blend. Holds unnormalized sums so partial results
/// can be merged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accumulator {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub normal: Vec3,
    pub intensity: f64,
    pub seg: [f64; SEG_BITS],
    pub weight: f64,
    pub transmittance: f64,
    pub t_term: f64,
}

impl Accumulator {
    pub fn new(t_term: f64) -> Self {
        Self {
            rgb: [0.0; 3],
            depth: 0.0,
            normal: Vec3::zeros(),
            intensity: 0.0,
            seg: [0.0; SEG_BITS],
            weight: 0.0,
            transmittance: 1.0,
            t_term,
        }
    }

    pub fn is_done(&self) -> bool {
        self.transmittance < self.t_term
    }

    /// Blends one contribution; returns `false` once transmittance has fallen
    /// below the early-out threshold.
    pub fn add(&mut self, c: &Contribution, scene: &PreparedScene, ray: &Ray) -> bool {
        if self.is_done() {
            return false;
        }
        let i = c.gaussian_index as usize;
        let g = &scene.gaussians[i];
        let mut n = g.normal;
        if n.dot(&ray.direction) > 0.0 {
            n = -n;
        }
        let rgb = scene.color(i, &ray.direction);
        self.add_layer(c.alpha, c.t_peak, rgb, n, g.intensity, &g.seg)
    }

    /// Blends an arbitrary surface sample, e.g. an opaque mesh hit.
    pub fn add_layer(
        &mut self,
        alpha: f64,
        depth: f64,
        rgb: [f64; 3],
        normal: Vec3,
        intensity: f64,
        seg: &[f64; SEG_BITS],
    ) -> bool {
        if self.is_done() {
            return false;
        }
        let w = self.transmittance * alpha;
        for ch in 0..3 {
            self.rgb[ch] += w * rgb[ch];
        }
        self.depth += w * depth;
        self.normal += w * normal;
        self.intensity += w * intensity;
        for b in 0..SEG_BITS {
            self.seg[b] += w * seg[b];
        }
        self.weight += w;
        self.transmittance *= 1.0 - alpha;
        !self.is_done()
    }

    /// Blends `back` behind `self`.
    pub fn merge(&self, back: &Accumulator) -> Accumulator {
        if self.is_done() {
            return *self;
        }
        let t = self.transmittance;
        let mut out = *self;
        for ch in 0..3 {
            out.rgb[ch] += t * back.rgb[ch];
        }
        out.depth += t * back.depth;
        out.normal += t * back.normal;
        out.intensity += t * back.intensity;
        for b in 0..SEG_BITS {
            out.seg[b] += t * back.seg[b];
        }
        out.weight += t * back.weight;
        out.transmittance *= back.transmittance;
        out
    }

    pub fn finish(&self) -> CompositeResult {
        let (depth, normal) = if self.weight > 1e-6 {
            let n = self.normal / self.weight;
            let len = n.norm();
            (
                self.depth / self.weight,
                if len > 0.0 { n / len } else { Vec3::zeros() },
            )
        } else {
            (0.0, Vec3::zeros())
        };
        CompositeResult {
            rgb: self.rgb,
            depth,
            normal,
            intensity: self.intensity,
            seg_features: self.seg,
            accumulated_alpha: self.weight.clamp(0.0, 1.0),
        }
    }
}

/// Composites contributions that must already be sorted by
/// [`contribution_order`]. Unsorted input is rejected in debug builds.
pub fn composite(
    contributions: &[Contribution],
    scene: &PreparedScene,
    ray: &Ray,
) -> Result<CompositeResult> {
    if cfg!(debug_assertions) {
        if let Some(w) = contributions
            .windows(2)
            .position(|w| contribution_order(&w[0], &w[1]) == Ordering::Greater)
        {
            return Err(Error::Contract(format!(
                "contributions unsorted at position {}",
                w + 1
            )));
        }
    }
    let mut acc = Accumulator::new(scene.params.t_term);
    for c in contributions {
        if !acc.add(c, scene, ray) {
            break;
        }
    }
    Ok(acc.finish())
}
