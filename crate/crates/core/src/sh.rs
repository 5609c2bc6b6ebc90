//! Real spherical-harmonics colour evaluation, degrees 0 to 3, using the
//! basis and sign convention of common Gaussian-splatting exporters.

use crate::math::Vec3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: u8 = 3;

/// Number of coefficients per channel for a degree.
pub fn coeff_count(degree: u8) -> usize {
    (degree as usize + 1).pow(2)
}

/// Inverse of [`coeff_count`].
pub fn degree_for_count(count: usize) -> Option<u8> {
    (0..=MAX_SH_DEGREE).find(|&d| coeff_count(d) == count)
}

/// Basis values for all coefficients up to the degree implied by `out.len()`.
pub fn basis(dir: &Vec3, out: &mut [f64]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = SH_C0;
    if out.len() < 4 {
        return;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if out.len() < 9 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = SH_C2[0] * xy;
    out[5] = SH_C2[1] * yz;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * xz;
    out[8] = SH_C2[4] * (xx - yy);
    if out.len() < 16 {
        return;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * xy * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
}

/// Evaluates view-dependent RGB. The DC term carries a +0.5 offset and the
/// result is clamped at zero per channel.
pub fn sh_eval(coeffs: &[[f64; 3]], dir: &Vec3) -> [f64; 3] {
    let mut b = [0.0; 16];
    let n = coeffs.len().min(16);
    basis(dir, &mut b[..n]);
    let mut rgb = [0.5; 3];
    for (k, c) in coeffs.iter().take(n).enumerate() {
        for ch in 0..3 {
            rgb[ch] += b[k] * c[ch];
        }
    }
    rgb.map(|v| v.max(0.0))
}

/// DC coefficient producing a given colour under [`sh_eval`] at degree 0.
pub fn dc_from_rgb(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|v| (v - 0.5) / SH_C0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dc_is_mid_grey() {
        assert_eq!(sh_eval(&[[0.0; 3]], &Vec3::z()), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn negative_output_clamps_to_zero() {
        let dc = [-0.5 / SH_C0 - 1.0; 3];
        assert_eq!(sh_eval(&[dc], &Vec3::z()), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn dc_from_rgb_inverts() {
        let rgb = sh_eval(&[dc_from_rgb([0.1, 0.7, 1.3])], &Vec3::x());
        for (a, b) in rgb.iter().zip([0.1, 0.7, 1.3]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degree_lookup() {
        assert_eq!(degree_for_count(1), Some(0));
        assert_eq!(degree_for_count(16), Some(3));
        assert_eq!(degree_for_count(5), None);
    }
}
