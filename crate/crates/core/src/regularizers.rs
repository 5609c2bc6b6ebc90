//! Training loss terms with analytic gradients and a small optimizer that
//! fits per-Gaussian appearance parameters at toy scale.
//!
//! Photometric gradients in [`fit_toy_scene`] are central finite differences
//! through the raster renderer; regularizer gradients are analytic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffers::FrameBuffers;
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::raster::render_raster;
use crate::scene::{SplatScene, MIN_SCALE, SEG_BITS};
use crate::settings::RenderSettings;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rgb: f64,
    pub l_norm: f64,
    pub l_flat: f64,
    pub l_lidar: f64,
    pub l_segm: f64,
    pub total: f64,
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: (a, 1),
            actual: (b, 1),
        });
    }
    Ok(())
}

/// `λ · Σᵢ ReLU(min(sᵢ) − c_flat)` (or the mean when `mean` is set) and its
/// gradient with respect to every `log_scale`.
pub fn loss_flat(scene: &SplatScene, c_flat: f64, lambda: f64, mean: bool) -> (f64, Vec<Vec3>) {
    let norm = if mean && !scene.is_empty() {
        1.0 / scene.len() as f64
    } else {
        1.0
    };
    let mut loss = 0.0;
    let grads = scene
        .gaussians
        .iter()
        .map(|g| {
            let k = g.min_scale_axis();
            let s = g.scales()[k];
            let mut grad = Vec3::zeros();
            if s > c_flat {
                loss += s - c_flat;
                // d exp(x)/dx = exp(x), zero where the scale floor clamps.
                if g.log_scale[k].exp() > MIN_SCALE {
                    grad[k] = lambda * norm * s;
                }
            }
            grad
        })
        .collect();
    (lambda * norm * loss, grads)
}

/// `−λ · mean(n̂_pred · n_gt)` over pixels where both normals are non-zero.
pub fn loss_normal(pred: &[[f64; 3]], gt: &[[f64; 3]], lambda: f64) -> Result<(f64, Vec<[f64; 3]>)> {
    check_len(gt.len(), pred.len())?;
    let valid: Vec<bool> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| Vec3::from(*p).norm() > 0.0 && Vec3::from(*g).norm() > 0.0)
        .collect();
    let n = valid.iter().filter(|&&v| v).count();
    let mut grads = vec![[0.0; 3]; pred.len()];
    if n == 0 {
        return Ok((0.0, grads));
    }
    let scale = -lambda / n as f64;
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        let p = Vec3::from(pred[i]);
        let g = Vec3::from(gt[i]);
        let len = p.norm();
        let u = p / len;
        sum += u.dot(&g);
        // d(u·g)/dp = (I − u uᵀ) g / |p|
        grads[i] = ((g - u * u.dot(&g)) / len * scale).into();
    }
    Ok((scale * sum, grads))
}

/// `λ · mean|pred − gt|`; the subgradient is zero at exact equality.
pub fn loss_l1_channel(pred: &[f64], gt: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    check_len(gt.len(), pred.len())?;
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let k = lambda / pred.len() as f64;
    let loss = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() * k;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| if p == g { 0.0 } else { k * (p - g).signum() })
        .collect();
    Ok((loss, grad))
}

/// The L1 term applied to each of the six bit channels and summed.
pub fn loss_segm(pred: &[[f64; SEG_BITS]], gt: &[[f64; SEG_BITS]], lambda: f64) -> Result<(f64, Vec<[f64; SEG_BITS]>)> {
    check_len(gt.len(), pred.len())?;
    let mut grads = vec![[0.0; SEG_BITS]; pred.len()];
    let mut total = 0.0;
    for b in 0..SEG_BITS {
        let p: Vec<f64> = pred.iter().map(|f| f[b]).collect();
        let g: Vec<f64> = gt.iter().map(|f| f[b]).collect();
        let (l, gr) = loss_l1_channel(&p, &g, lambda)?;
        total += l;
        for (dst, v) in grads.iter_mut().zip(gr) {
            dst[b] = v;
        }
    }
    Ok((total, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lambdas {
    pub rgb: f64,
    pub norm: f64,
    pub flat: f64,
    pub lidar: f64,
    pub segm: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            norm: 0.1,
            flat: 100.0,
            lidar: 0.1,
            segm: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub opacity: f64,
    pub scale: f64,
    pub color: f64,
    pub intensity: f64,
    pub seg: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            opacity: 0.05,
            scale: 0.01,
            color: 0.05,
            intensity: 0.05,
            seg: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSchedule {
    pub steps: usize,
    pub lambdas: Lambdas,
    pub c_flat: f64,
    pub flat_mean: bool,
    pub learning_rates: LearningRates,
    /// Total loss at or below which optimization stops.
    pub tolerance: f64,
    pub fd_step: f64,
}

impl Default for FitSchedule {
    fn default() -> Self {
        Self {
            steps: 200,
            lambdas: Lambdas::default(),
            c_flat: 0.01,
            flat_mean: false,
            learning_rates: LearningRates::default(),
            tolerance: 1e-9,
            fd_step: 1e-4,
        }
    }
}

/// A reference view: camera plus the finalized buffers to match.
#[derive(Clone, Debug)]
pub struct FitTarget {
    pub camera: CameraModel,
    pub buffers: FrameBuffers,
}

pub fn render_targets(reference: &SplatScene, cams: &[CameraModel], settings: &RenderSettings) -> Result<Vec<FitTarget>> {
    cams.iter()
        .map(|c| {
            Ok(FitTarget {
                camera: c.clone(),
                buffers: render_raster(reference, c, settings)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub scene: SplatScene,
    /// Total loss before each step, plus the final value.
    pub losses: Vec<f64>,
    pub steps_run: usize,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Opacity,
    LogScale(usize),
    Color(usize),
    Intensity,
    Seg(usize),
}

impl Slot {
    const ALL: [Slot; 14] = [
        Slot::Opacity,
        Slot::LogScale(0),
        Slot::LogScale(1),
        Slot::LogScale(2),
        Slot::Color(0),
        Slot::Color(1),
        Slot::Color(2),
        Slot::Intensity,
        Slot::Seg(0),
        Slot::Seg(1),
        Slot::Seg(2),
        Slot::Seg(3),
        Slot::Seg(4),
        Slot::Seg(5),
    ];

    fn get(self, s: &SplatScene, i: usize) -> f64 {
        let g = &s.gaussians[i];
        match self {
            Slot::Opacity => g.opacity_logit,
            Slot::LogScale(k) => g.log_scale[k],
            Slot::Color(c) => g.color_sh[0][c],
            Slot::Intensity => g.intensity_logit,
            Slot::Seg(b) => g.seg_bit_logits[b],
        }
    }

    fn set(self, s: &mut SplatScene, i: usize, v: f64) {
        let g = &mut s.gaussians[i];
        match self {
            Slot::Opacity => g.opacity_logit = v,
            Slot::LogScale(k) => g.log_scale[k] = v,
            Slot::Color(c) => g.color_sh[0][c] = v,
            Slot::Intensity => g.intensity_logit = v,
            Slot::Seg(b) => g.seg_bit_logits[b] = v,
        }
    }

    fn lr(self, r: &LearningRates) -> f64 {
        match self {
            Slot::Opacity => r.opacity,
            Slot::LogScale(_) => r.scale,
            Slot::Color(_) => r.color,
            Slot::Intensity => r.intensity,
            Slot::Seg(_) => r.seg,
        }
    }
}

fn render_loss(scene: &SplatScene, targets: &[FitTarget], settings: &RenderSettings, l: &Lambdas) -> Result<LossReport> {
    let mut rep = LossReport::default();
    for t in targets {
        let fb = render_raster(scene, &t.camera, settings)?;
        let flat = |b: &FrameBuffers| b.rgb.iter().flatten().copied().collect::<Vec<f64>>();
        if l.rgb != 0.0 {
            rep.l_rgb += loss_l1_channel(&flat(&fb), &flat(&t.buffers), l.rgb)?.0;
        }
        if l.norm != 0.0 {
            rep.l_norm += loss_normal(&fb.normal, &t.buffers.normal, l.norm)?.0;
        }
        if l.lidar != 0.0 {
            rep.l_lidar += loss_l1_channel(&fb.intensity, &t.buffers.intensity, l.lidar)?.0;
        }
        if l.segm != 0.0 {
            rep.l_segm += loss_segm(&fb.seg_features, &t.buffers.seg_features, l.segm)?.0;
        }
    }
    Ok(rep)
}

/// Full loss report for a scene against the targets.
pub fn evaluate_losses(
    scene: &SplatScene,
    targets: &[FitTarget],
    settings: &RenderSettings,
    schedule: &FitSchedule,
) -> Result<LossReport> {
    let mut rep = render_loss(scene, targets, settings, &schedule.lambdas)?;
    rep.l_flat = loss_flat(scene, schedule.c_flat, schedule.lambdas.flat, schedule.flat_mean).0;
    rep.total = rep.l_rgb + rep.l_norm + rep.l_flat + rep.l_lidar + rep.l_segm;
    Ok(rep)
}

/// Adam over opacity, scale, DC colour, intensity and segmentation logits,
/// with the step size decayed linearly to 1% over the schedule.
pub fn fit_toy_scene(
    targets: &[FitTarget],
    init: &SplatScene,
    settings: &RenderSettings,
    schedule: &FitSchedule,
) -> Result<FitResult> {
    if init.len() > 500 {
        return Err(Error::Config(format!("toy fit supports at most 500 Gaussians, got {}", init.len())));
    }
    if let Some(t) = targets.iter().find(|t| t.camera.width > 128 || t.camera.height > 128) {
        return Err(Error::Config(format!(
            "toy fit renders at most 128x128, got {}x{}",
            t.camera.width, t.camera.height
        )));
    }
    if init.gaussians.iter().any(|g| g.color_sh.is_empty()) {
        return Err(Error::Config("every Gaussian needs a DC colour term".into()));
    }
    let lam = &schedule.lambdas;
    let photometric = !targets.is_empty() && (lam.rgb != 0.0 || lam.norm != 0.0 || lam.lidar != 0.0 || lam.segm != 0.0);
    let params: Vec<(usize, Slot)> = (0..init.len())
        .flat_map(|i| Slot::ALL.iter().map(move |&s| (i, s)))
        .filter(|(_, s)| s.lr(&schedule.learning_rates) > 0.0)
        .collect();
    let mut scene = init.clone();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(schedule.steps + 1);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-12);

    for step in 0..=schedule.steps {
        let total = evaluate_losses(&scene, targets, settings, schedule)?.total;
        if !total.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(total);
        if total <= schedule.tolerance {
            return Ok(FitResult {
                scene,
                losses,
                steps_run: step,
                converged: true,
            });
        }
        if step == schedule.steps {
            break;
        }
        let (_, flat_grad) = loss_flat(&scene, schedule.c_flat, lam.flat, schedule.flat_mean);
        let h = schedule.fd_step;
        let grads: Vec<f64> = params
            .par_iter()
            .map(|&(i, slot)| {
                let mut g = match slot {
                    Slot::LogScale(k) => flat_grad[i][k],
                    _ => 0.0,
                };
                if photometric {
                    let mut s = scene.clone();
                    let x = slot.get(&s, i);
                    slot.set(&mut s, i, x + h);
                    let lp = render_loss(&s, targets, settings, lam)?;
                    slot.set(&mut s, i, x - h);
                    let lm = render_loss(&s, targets, settings, lam)?;
                    let sum = |r: &LossReport| r.l_rgb + r.l_norm + r.l_lidar + r.l_segm;
                    g += (sum(&lp) - sum(&lm)) / (2.0 * h);
                }
                Ok(g)
            })
            .collect::<Result<_>>()?;
        let t = (step + 1) as i32;
        let decay = 1.0 - 0.99 * step as f64 / schedule.steps.max(1) as f64;
        for (p, &(i, slot)) in params.iter().enumerate() {
            let g = grads[p];
            m[p] = b1 * m[p] + (1.0 - b1) * g;
            v[p] = b2 * v[p] + (1.0 - b2) * g * g;
            let mh = m[p] / (1.0 - b1.powi(t));
            let vh = v[p] / (1.0 - b2.powi(t));
            let x = slot.get(&scene, i);
            slot.set(&mut scene, i, x - slot.lr(&schedule.learning_rates) * decay * mh / (vh.sqrt() + eps));
        }
    }
    let steps_run = schedule.steps;
    Ok(FitResult {
        scene,
        losses,
        steps_run,
        converged: false,
    })
}

/// Fraction of Gaussians whose smallest-scale axis survives a ±`eps`
/// perturbation of every log-scale component.
pub fn argmin_stable_fraction(scene: &SplatScene, eps: f64) -> f64 {
    if scene.is_empty() {
        return 1.0;
    }
    let stable = scene
        .gaussians
        .iter()
        .filter(|g| {
            let axis = g.min_scale_axis();
            (0..3).all(|k| {
                [eps, -eps].iter().all(|d| {
                    let mut p = (*g).clone();
                    p.log_scale[k] += d;
                    p.min_scale_axis() == axis
                })
            })
        })
        .count();
    stable as f64 / scene.len() as f64
}
