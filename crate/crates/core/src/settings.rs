use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric knobs shared by both render backends and the LiDAR simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    /// Proxy ellipsoid radius in standard deviations (a floor; see
    /// [`crate::kernel::PreparedGaussian::radius`]).
    pub sigma_cut: f64,
    pub alpha_cull: f64,
    pub alpha_max: f64,
    /// Early-out transmittance.
    pub t_term: f64,
    pub tile_size: u32,
    pub near: f64,
    pub far: f64,
    pub background_rgb: [f64; 3],
    /// Re-sort each pixel's contributions by peak distance in the raster
    /// backend instead of compositing in global mean-distance order.
    pub resort_by_t_peak: bool,
    /// Hit-buffer capacity of the ray-tracing backend.
    pub k_buffer: usize,
    pub bvh_leaf_max: usize,
    pub seg_alpha_min: f64,
    /// Angular guard band of each cubemap face, degrees.
    pub cube_guard_deg: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            sigma_cut: 3.0,
            alpha_cull: 1.0 / 255.0,
            alpha_max: 0.995,
            t_term: 1e-4,
            tile_size: 16,
            near: 0.05,
            far: 1e4,
            background_rgb: [0.0; 3],
            resort_by_t_peak: false,
            k_buffer: 16,
            bvh_leaf_max: 8,
            seg_alpha_min: 0.5,
            cube_guard_deg: 2.0,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.sigma_cut > 0.0) {
            return bad("sigma_cut must be > 0");
        }
        if !(self.alpha_cull > 0.0 && self.alpha_cull < 1.0) {
            return bad("alpha_cull must be in (0,1)");
        }
        if !(self.alpha_max > 0.0 && self.alpha_max < 1.0) {
            return bad("alpha_max must be in (0,1)");
        }
        if !(self.t_term >= 0.0 && self.t_term < 1.0) {
            return bad("t_term must be in [0,1)");
        }
        if self.tile_size == 0 {
            return bad("tile_size must be >= 1");
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return bad("need 0 <= near < far");
        }
        if self.k_buffer == 0 || self.bvh_leaf_max == 0 {
            return bad("k_buffer and bvh_leaf_max must be >= 1");
        }
        if !(self.seg_alpha_min > 0.0 && self.seg_alpha_min <= 1.0) {
            return bad("seg_alpha_min must be in (0,1]");
        }
        if !(self.cube_guard_deg >= 0.0 && self.cube_guard_deg < 45.0) {
            return bad("cube_guard_deg must be in [0,45)");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: Self = read_json(path)?;
        s.validate()?;
        Ok(s)
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
