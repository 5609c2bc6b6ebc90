//! Turns composited feature channels into final outputs: six-bit
//! segmentation labels, unit normals and no-hit masking.
//!
//! Bit order: feature 0 is the least significant bit of the label ID.

use crate::buffers::{FrameBuffers, NO_HIT};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::SEG_BITS;

pub const MAX_LABEL: u8 = 63;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegDecodeSettings {
    pub seg_alpha_min: f64,
}

impl Default for SegDecodeSettings {
    fn default() -> Self {
        Self { seg_alpha_min: 0.5 }
    }
}

pub fn encode_seg_bits(label_id: u8) -> Result<[f64; SEG_BITS]> {
    if label_id > MAX_LABEL {
        return Err(Error::Config(format!("label id {label_id} outside 0..63")));
    }
    Ok(std::array::from_fn(|b| ((label_id >> b) & 1) as f64))
}

/// Alpha-normalizes the features, rounds each to a bit and assembles the ID;
/// [`NO_HIT`] when coverage is below `seg_alpha_min`.
pub fn decode_seg_id(features: &[f64; SEG_BITS], accumulated_alpha: f64, s: &SegDecodeSettings) -> u8 {
    if !(accumulated_alpha >= s.seg_alpha_min) {
        return NO_HIT;
    }
    features
        .iter()
        .enumerate()
        .filter(|(_, &f)| f / accumulated_alpha >= 0.5)
        .fold(0u8, |id, (b, _)| id | (1 << b))
}

const ALPHA_EPS: f64 = 1e-6;

/// Masks and decodes raw composited buffers. Idempotent.
pub fn finalize_buffers(raw: &FrameBuffers, s: &SegDecodeSettings) -> FrameBuffers {
    let mut out = raw.clone();
    for i in 0..out.len() {
        let a = out.alpha[i];
        let n = Vec3::from(out.normal[i]);
        let len = n.norm();
        out.normal[i] = if a < ALPHA_EPS || len == 0.0 {
            [0.0; 3]
        } else if (len - 1.0).abs() < 1e-12 {
            out.normal[i]
        } else {
            (n / len).into()
        };
        if a < s.seg_alpha_min {
            out.depth[i] = 0.0;
        }
        out.seg_id[i] = decode_seg_id(&out.seg_features[i], a, s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_000101_is_five() {
        let s = SegDecodeSettings::default();
        assert_eq!(decode_seg_id(&[1.0, 0.0, 1.0, 0.0, 0.0, 0.0], 1.0, &s), 5);
        assert_eq!(decode_seg_id(&[0.0; 6], 1.0, &s), 0);
    }

    #[test]
    fn encode_extremes() {
        assert_eq!(encode_seg_bits(0).unwrap(), [0.0; 6]);
        assert_eq!(encode_seg_bits(63).unwrap(), [1.0; 6]);
        assert!(encode_seg_bits(64).is_err());
    }

    #[test]
    fn exhaustive_round_trip_over_alphas() {
        let s = SegDecodeSettings::default();
        for id in 0..=MAX_LABEL {
            let bits = encode_seg_bits(id).unwrap();
            assert_eq!(decode_seg_id(&bits, 1.0, &s), id);
            for a in [0.6, 0.9, 1.0] {
                assert_eq!(decode_seg_id(&bits.map(|b| b * a), a, &s), id);
            }
        }
    }

    #[test]
    fn low_coverage_is_no_hit() {
        let s = SegDecodeSettings::default();
        assert_eq!(decode_seg_id(&[0.4; 6], 0.4, &s), NO_HIT);
        assert_eq!(decode_seg_id(&[0.0; 6], f64::NAN, &s), NO_HIT);
    }

    #[test]
    fn all_zero_buffers_decode_to_no_hit() {
        let raw = FrameBuffers::new(3, 2);
        let out = finalize_buffers(&raw, &SegDecodeSettings::default());
        assert!(out.seg_id.iter().all(|&id| id == NO_HIT));
        assert_eq!(out.rgb, raw.rgb);
        assert_eq!(out.depth, raw.depth);
    }

    #[test]
    fn finalize_matches_scalar_decode_and_is_idempotent() {
        let s = SegDecodeSettings::default();
        let mut raw = FrameBuffers::new(2, 2);
        // pixel 0: label 37 at alpha 0.8
        let bits = encode_seg_bits(37).unwrap();
        raw.alpha[0] = 0.8;
        raw.seg_features[0] = bits.map(|b| b * 0.8);
        raw.depth[0] = 4.0;
        raw.normal[0] = [0.0, 3.0, 4.0];
        // pixel 1: too little coverage, depth must be masked
        raw.alpha[1] = 0.3;
        raw.depth[1] = 9.0;
        raw.normal[1] = [1.0, 0.0, 0.0];
        let out = finalize_buffers(&raw, &s);
        assert_eq!(out.seg_id[0], 37);
        assert_eq!(out.depth[0], 4.0);
        assert!((Vec3::from(out.normal[0]) - Vec3::new(0.0, 0.6, 0.8)).norm() < 1e-15);
        assert_eq!(out.seg_id[1], NO_HIT);
        assert_eq!(out.depth[1], 0.0);
        assert_eq!(out.normal[2], [0.0; 3]);
        assert_eq!(finalize_buffers(&out, &s), out);
    }
}
