#![allow(dead_code)]

use nalgebra::{Quaternion, UnitQuaternion};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use splatsim::math::{logit, Vec3};
use splatsim::mesh::MeshInstance;
use splatsim::scene::{Gaussian, SplatScene};

pub fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    loop {
        let q = Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            return UnitQuaternion::from_quaternion(q);
        }
    }
}

pub fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Anisotropic Gaussian with random orientation, appearance and features.
pub fn random_gaussian(rng: &mut ChaCha8Rng, mean: Vec3, scale_range: (f64, f64), sh_degree: u8) -> Gaussian {
    let log_scale = Vec3::from_fn(|_, _| rng.gen_range(scale_range.0.ln()..scale_range.1.ln()));
    let n = (sh_degree as usize + 1).pow(2);
    let mut sh: Vec<[f64; 3]> = (0..n).map(|_| [0.0; 3]).collect();
    sh[0] = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
    for c in sh.iter_mut().skip(1) {
        *c = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    }
    let mut g = Gaussian::new(
        mean,
        random_rotation(rng).into_inner(),
        log_scale,
        logit(rng.gen_range(0.05..0.99)),
        sh,
    );
    g.intensity_logit = rng.gen_range(-3.0..3.0);
    g.seg_bit_logits = std::array::from_fn(|_| rng.gen_range(-6.0..6.0));
    g
}

/// Gaussians in a frustum-like box in front of a camera at the origin
/// looking along +z.
pub fn frontal_scene(rng: &mut ChaCha8Rng, n: usize) -> SplatScene {
    let deg = rng.gen_range(0..=1u8);
    let gs = (0..n)
        .map(|_| {
            let z = rng.gen_range(3.0..12.0);
            let mean = Vec3::new(rng.gen_range(-0.6..0.6) * z, rng.gen_range(-0.6..0.6) * z, z);
            random_gaussian(rng, mean, (0.03, 0.4), deg)
        })
        .collect();
    let mut s = SplatScene::new(gs);
    s.sh_degree = deg;
    s
}

/// Gaussians in a spherical shell around the origin.
pub fn shell_scene(rng: &mut ChaCha8Rng, n: usize, r: (f64, f64)) -> SplatScene {
    let deg = rng.gen_range(0..=1u8);
    let gs = (0..n)
        .map(|_| {
            let mean = unit_vector(rng) * rng.gen_range(r.0..r.1);
            random_gaussian(rng, mean, (0.03, 0.4), deg)
        })
        .collect();
    let mut s = SplatScene::new(gs);
    s.sh_degree = deg;
    s
}

/// Opaque wall of flat Gaussians spanning `u` and `v` in the plane
/// `axis = offset`. Thin axis first in the scale order.
pub fn wall(axis: usize, offset: f64, u: (f64, f64), v: (f64, f64), step: f64, opacity: f64, intensity: f64) -> Vec<Gaussian> {
    let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut out = Vec::new();
    let mut a = u.0;
    while a <= u.1 + 1e-9 {
        let mut b = v.0;
        while b <= v.1 + 1e-9 {
            let mut mean = Vec3::zeros();
            mean[axis] = offset;
            mean[ua] = a;
            mean[va] = b;
            let mut g = Gaussian::isotropic(mean, step, opacity, [0.6, 0.5, 0.4]);
            let mut ls = Vec3::repeat(step.ln());
            ls[axis] = (0.01f64).ln();
            g.log_scale = ls;
            g.intensity_logit = logit(intensity);
            out.push(g);
            b += step;
        }
        a += step;
    }
    out
}

/// Axis-aligned quad in the plane `axis = offset`, two triangles.
pub fn quad(axis: usize, offset: f64, u: (f64, f64), v: (f64, f64)) -> MeshInstance {
    let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
    let corner = |a: f64, b: f64| {
        let mut p = Vec3::zeros();
        p[axis] = offset;
        p[ua] = a;
        p[va] = b;
        p
    };
    MeshInstance::new(
        vec![corner(u.0, v.0), corner(u.1, v.0), corner(u.1, v.1), corner(u.0, v.1)],
        vec![[0, 1, 2], [0, 2, 3]],
        None,
    )
    .unwrap()
}

pub const CUBE_OBJ: &str = "\
v -0.5 -0.5 -0.5\nv 0.5 -0.5 -0.5\nv 0.5 0.5 -0.5\nv -0.5 0.5 -0.5\n\
v -0.5 -0.5 0.5\nv 0.5 -0.5 0.5\nv 0.5 0.5 0.5\nv -0.5 0.5 0.5\n\
f 1 4 3\nf 1 3 2\nf 5 6 7\nf 5 7 8\nf 1 2 6\nf 1 6 5\n\
f 4 8 7\nf 4 7 3\nf 1 5 8\nf 1 8 4\nf 2 3 7\nf 2 7 6\n";

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
