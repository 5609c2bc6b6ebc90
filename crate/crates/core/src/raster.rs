//! Tile rasterization backend.
//!
//! Every Gaussian's proxy ellipsoid is bounded in the screen space of one or
//! more undistorted perspective "faces" (the camera itself for a plain
//! pinhole, one virtual face for a distorted pinhole, six cube faces for
//! wide fields of view). Each face tile keeps the Gaussians that overlap it,
//! in global order of Euclidean distance from the rig origin. Every output
//! pixel then looks up its face tile and evaluates the shared ray kernel
//! with the exact output-camera ray, so no image resampling happens at face
//! seams.

use rayon::prelude::*;

use crate::buffers::FrameBuffers;
use crate::camera::{CameraKind, CameraModel, CubemapPlan, FaceCamera, FaceSample};
use crate::error::Result;
use crate::kernel::{contribution_order, Accumulator, CompositeResult, PreparedGaussian, PreparedScene, Ray};
use crate::math::{Mat3, Vec3};
use crate::modality::{finalize_buffers, SegDecodeSettings};
use crate::scene::SplatScene;
use crate::settings::RenderSettings;

/// Inclusive tile rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileRange {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxyBound {
    pub gaussian_index: u32,
    pub tiles: TileRange,
    /// Continuous face-pixel rectangle `[u0, u1] × [v0, v1]` before tiling.
    pub rect: [f64; 4],
    /// Distance from the rig origin to the mean, metres.
    pub sort_key: f64,
}

const BOUND_PAD_PX: f64 = 1e-3;

/// Conservative face-space bound of the proxy ellipsoid. `None` when the
/// ellipsoid lies behind the face, misses the face image, or can never
/// reach `alpha_cull`.
pub fn bound_proxy(
    g: &PreparedGaussian,
    index: u32,
    face: &FaceCamera,
    rig: &CameraModel,
    tile_size: u32,
) -> Option<ProxyBound> {
    if g.is_culled() {
        return None;
    }
    let world_to_face = face.camera_from_face.transpose() * rig.pose.rotation.inverse().to_rotation_matrix().into_inner();
    let rel = g.mean - rig.origin();
    let mu = world_to_face * rel;
    let a = world_to_face * g.rotation * Mat3::from_diagonal(&g.scales);
    // Ellipsoid {x : (x - mu)ᵀ M⁻¹ (x - mu) <= 1} with M = r² Σ.
    let m = (a * a.transpose()) * (g.radius * g.radius);
    let ext_z = m[(2, 2)].sqrt();
    let sort_key = rel.norm();

    if mu.z + ext_z <= 0.0 {
        return None;
    }
    let (w, h) = (face.width as f64, face.height as f64);
    let mut rect = [0.0, w, 0.0, h];
    if mu.z - ext_z > 1e-9 * (1.0 + mu.z.abs()) {
        // Dual conic of the silhouette in normalized image coordinates.
        let c = m - mu * mu.transpose();
        let axis = |ci: usize| -> Option<(f64, f64)> {
            let disc = c[(ci, 2)] * c[(ci, 2)] - c[(ci, ci)] * c[(2, 2)];
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let r0 = (c[(ci, 2)] + s) / c[(2, 2)];
            let r1 = (c[(ci, 2)] - s) / c[(2, 2)];
            Some((r0.min(r1), r0.max(r1)))
        };
        let (ux0, ux1) = axis(0)?;
        let (uy0, uy1) = axis(1)?;
        let pad_x = BOUND_PAD_PX + 1e-9 * face.fx * ux0.abs().max(ux1.abs());
        let pad_y = BOUND_PAD_PX + 1e-9 * face.fy * uy0.abs().max(uy1.abs());
        rect = [
            (face.fx * ux0 + face.cx - pad_x).max(0.0),
            (face.fx * ux1 + face.cx + pad_x).min(w),
            (face.fy * uy0 + face.cy - pad_y).max(0.0),
            (face.fy * uy1 + face.cy + pad_y).min(h),
        ];
        if !(rect[0] <= rect[1] && rect[2] <= rect[3]) {
            return None;
        }
    }
    let tiles_x = face.width.div_ceil(tile_size);
    let tiles_y = face.height.div_ceil(tile_size);
    let ts = tile_size as f64;
    let tile = |v: f64, n: u32| ((v / ts).floor().max(0.0) as u32).min(n - 1);
    Some(ProxyBound {
        gaussian_index: index,
        tiles: TileRange {
            x0: tile(rect[0], tiles_x),
            x1: tile(rect[1], tiles_x),
            y0: tile(rect[2], tiles_y),
            y1: tile(rect[3], tiles_y),
        },
        rect,
        sort_key,
    })
}

/// Faces used for binning plus the face sample of every output pixel.
#[derive(Clone, Debug)]
pub struct RasterView {
    pub faces: Vec<FaceCamera>,
    pub samples: Vec<FaceSample>,
}

impl RasterView {
    pub fn new(cam: &CameraModel, settings: &RenderSettings) -> Self {
        if cam.kind == CameraKind::Pinhole && !cam.needs_cubemap() {
            if cam.distortion == [0.0; 4] {
                return Self::pinhole_direct(cam);
            }
            return Self::pinhole_undistorted(cam);
        }
        let plan = CubemapPlan::new(cam, settings.cube_guard_deg);
        Self {
            faces: plan.faces,
            samples: plan.samples,
        }
    }

    fn pinhole_direct(cam: &CameraModel) -> Self {
        let face = FaceCamera {
            camera_from_face: Mat3::identity(),
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
        };
        let samples = (0..cam.height)
            .flat_map(|j| {
                (0..cam.width).map(move |i| FaceSample {
                    face: 0,
                    px: [i as f64 + 0.5, j as f64 + 0.5],
                })
            })
            .collect();
        Self {
            faces: vec![face],
            samples,
        }
    }

    /// Single undistorted face covering the undistorted image of every pixel.
    fn pinhole_undistorted(cam: &CameraModel) -> Self {
        let mut pts = Vec::with_capacity(cam.pixel_count());
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for j in 0..cam.height {
            for i in 0..cam.width {
                let d = cam.pixel_direction([i as f64 + 0.5, j as f64 + 0.5]);
                let p = [cam.fx * d.x / d.z, cam.fy * d.y / d.z];
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
                pts.push(p);
            }
        }
        let ox = lo[0].floor() - 1.0;
        let oy = lo[1].floor() - 1.0;
        let face = FaceCamera {
            camera_from_face: Mat3::identity(),
            width: (hi[0] - ox).ceil() as u32 + 2,
            height: (hi[1] - oy).ceil() as u32 + 2,
            fx: cam.fx,
            fy: cam.fy,
            cx: -ox,
            cy: -oy,
        };
        let samples = pts
            .into_iter()
            .map(|p| FaceSample {
                face: 0,
                px: [p[0] - ox, p[1] - oy],
            })
            .collect();
        Self {
            faces: vec![face],
            samples,
        }
    }
}

/// Gaussian indices ordered by distance of the mean from `origin`, ties by
/// index.
pub fn global_sort_order(prepared: &PreparedScene, origin: &Vec3) -> Vec<u32> {
    let keys: Vec<f64> = prepared
        .gaussians
        .iter()
        .map(|g| (g.mean - origin).norm())
        .collect();
    let mut order: Vec<u32> = (0..prepared.len() as u32).collect();
    order.sort_by(|&a, &b| keys[a as usize].total_cmp(&keys[b as usize]).then(a.cmp(&b)));
    order
}

struct FaceBins {
    tiles_x: u32,
    tiles_y: u32,
    bins: Vec<Vec<u32>>,
}

impl FaceBins {
    fn candidates(&self, px: [f64; 2], tile_size: u32) -> &[u32] {
        let ts = tile_size as f64;
        let tx = ((px[0] / ts).floor().max(0.0) as u32).min(self.tiles_x - 1);
        let ty = ((px[1] / ts).floor().max(0.0) as u32).min(self.tiles_y - 1);
        &self.bins[(ty * self.tiles_x + tx) as usize]
    }
}

fn bin_faces(
    prepared: &PreparedScene,
    view: &RasterView,
    cam: &CameraModel,
    order: &[u32],
    tile_size: u32,
) -> Vec<FaceBins> {
    view.faces
        .par_iter()
        .map(|face| {
            let tiles_x = face.width.div_ceil(tile_size);
            let tiles_y = face.height.div_ceil(tile_size);
            let mut bins = vec![Vec::new(); (tiles_x * tiles_y) as usize];
            for &i in order {
                if let Some(b) = bound_proxy(&prepared.gaussians[i as usize], i, face, cam, tile_size) {
                    for ty in b.tiles.y0..=b.tiles.y1 {
                        for tx in b.tiles.x0..=b.tiles.x1 {
                            bins[(ty * tiles_x + tx) as usize].push(i);
                        }
                    }
                }
            }
            FaceBins {
                tiles_x,
                tiles_y,
                bins,
            }
        })
        .collect()
}

/// Composites candidates in the given order, or by peak distance when
/// `resort` is set.
pub fn shade_candidates(
    prepared: &PreparedScene,
    candidates: &[u32],
    ray: &Ray,
    resort: bool,
) -> CompositeResult {
    let mut acc = Accumulator::new(prepared.params.t_term);
    if resort {
        let mut cs: Vec<_> = candidates
            .iter()
            .filter_map(|&i| prepared.response(i as usize, ray))
            .collect();
        cs.sort_by(contribution_order);
        for c in &cs {
            if !acc.add(c, prepared, ray) {
                break;
            }
        }
    } else {
        for &i in candidates {
            if let Some(c) = prepared.response(i as usize, ray) {
                if !acc.add(&c, prepared, ray) {
                    break;
                }
            }
        }
    }
    acc.finish()
}

pub(crate) fn assemble(
    cam: &CameraModel,
    settings: &RenderSettings,
    shade: impl Fn(usize, &Ray) -> CompositeResult + Sync,
) -> FrameBuffers {
    let w = cam.width as usize;
    let rows: Vec<Vec<CompositeResult>> = (0..cam.height)
        .into_par_iter()
        .map(|j| {
            (0..cam.width)
                .map(|i| {
                    let ray = cam.pixel_center_ray(i, j);
                    shade(j as usize * w + i as usize, &ray)
                })
                .collect()
        })
        .collect();
    let mut fb = FrameBuffers::new(cam.width, cam.height);
    for (idx, r) in rows.iter().flatten().enumerate() {
        fb.set(idx, r, &settings.background_rgb);
    }
    finalize_buffers(
        &fb,
        &SegDecodeSettings {
            seg_alpha_min: settings.seg_alpha_min,
        },
    )
}

pub(crate) fn prepare(
    scene: &SplatScene,
    cam: &CameraModel,
    settings: &RenderSettings,
) -> Result<(PreparedScene, CameraModel)> {
    scene.ensure_renderable()?;
    settings.validate()?;
    let cam = cam.clone().with_clip(settings.near, settings.far);
    cam.validate()?;
    Ok((PreparedScene::new(scene, settings.into()), cam))
}

pub fn render_raster(scene: &SplatScene, cam: &CameraModel, settings: &RenderSettings) -> Result<FrameBuffers> {
    let (prepared, cam) = prepare(scene, cam, settings)?;
    Ok(render_prepared(&prepared, &cam, settings))
}

/// Raster render of an already prepared scene; `cam` must carry the
/// settings' clip range.
pub fn render_prepared(prepared: &PreparedScene, cam: &CameraModel, settings: &RenderSettings) -> FrameBuffers {
    let view = RasterView::new(cam, settings);
    let order = global_sort_order(prepared, &cam.origin());
    let bins = bin_faces(prepared, &view, cam, &order, settings.tile_size);
    assemble(cam, settings, |idx, ray| {
        let s = view.samples[idx];
        let cands = bins[s.face as usize].candidates(s.px, settings.tile_size);
        shade_candidates(prepared, cands, ray, settings.resort_by_t_peak)
    })
}

/// Reference path without proxy bounding: every pixel walks the whole scene
/// in global distance order.
pub fn render_raster_unbounded(
    scene: &SplatScene,
    cam: &CameraModel,
    settings: &RenderSettings,
) -> Result<FrameBuffers> {
    let (prepared, cam) = prepare(scene, cam, settings)?;
    let order = global_sort_order(&prepared, &cam.origin());
    Ok(assemble(&cam, settings, |_, ray| {
        shade_candidates(&prepared, &order, ray, settings.resort_by_t_peak)
    }))
}
