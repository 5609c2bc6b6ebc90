//! Spinning multi-beam LiDAR simulation on top of the ray tracer.
//!
//! Sensor frame: azimuth 0 is +x, azimuth grows counter-clockwise about +z,
//! elevation is measured up from the xy-plane.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Ray;
use crate::math::{PoseJson, RigidTransform, Vec3};
use crate::mesh::{LightingSettings, MeshInstance};
use crate::modality::{decode_seg_id, SegDecodeSettings};
use crate::ply::{self, ScalarType, Value};
use crate::raytrace::{build_bvh, trace_ray_hybrid};
use crate::scene::SplatScene;
use crate::settings::RenderSettings;

#[derive(Clone, Debug, PartialEq)]
pub struct ScanPattern {
    pub beam_elevations: Vec<f64>,
    pub azimuth_count: u32,
    pub azimuth_range: [f64; 2],
    pub min_range: f64,
    pub max_range: f64,
    pub mount_pose: RigidTransform,
}

impl ScanPattern {
    pub fn validate(&self) -> Result<()> {
        if self.beam_elevations.is_empty() || self.beam_elevations.len() > 256 {
            return Err(Error::Config("scan pattern needs 1..=256 beams".into()));
        }
        if !self.beam_elevations.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("beam elevations must be strictly increasing".into()));
        }
        if self.azimuth_count == 0 || self.azimuth_count > 65536 {
            return Err(Error::Config("azimuth_count must be in 1..=65536".into()));
        }
        if !(self.min_range >= 0.0 && self.min_range < self.max_range) {
            return Err(Error::Config("need 0 <= min_range < max_range".into()));
        }
        if !self.azimuth_range.iter().all(|a| a.is_finite()) {
            return Err(Error::Config("azimuth range must be finite".into()));
        }
        Ok(())
    }

    pub fn azimuth(&self, a: u32) -> f64 {
        let [start, end] = self.azimuth_range;
        start + (end - start) * a as f64 / self.azimuth_count as f64
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let json: ScanPatternJson = crate::settings::read_json(path)?;
        let p = Self::from(&json);
        p.validate()?;
        Ok(p)
    }
}

/// Unit direction in the sensor frame.
pub fn beam_direction(elevation: f64, azimuth: f64) -> Vec3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vec3::new(ce * ca, ce * sa, se)
}

/// Config form; angles in degrees.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScanPatternJson {
    pub elevations_deg: Vec<f64>,
    pub azimuth_count: u32,
    #[serde(default)]
    pub azimuth_start_deg: f64,
    #[serde(default = "full_turn")]
    pub azimuth_end_deg: f64,
    #[serde(default)]
    pub min_range: f64,
    pub max_range: f64,
    #[serde(default)]
    pub mount_pose: PoseJson,
}

fn full_turn() -> f64 {
    360.0
}

impl From<&ScanPatternJson> for ScanPattern {
    fn from(j: &ScanPatternJson) -> Self {
        Self {
            beam_elevations: j.elevations_deg.iter().map(|d| d.to_radians()).collect(),
            azimuth_count: j.azimuth_count,
            azimuth_range: [j.azimuth_start_deg.to_radians(), j.azimuth_end_deg.to_radians()],
            min_range: j.min_range,
            max_range: j.max_range,
            mount_pose: RigidTransform::from(&j.mount_pose),
        }
    }
}

/// One world-space ray per (beam, azimuth), beam-major.
#[derive(Clone, Debug)]
pub struct RayBundle {
    pub rays: Vec<Ray>,
    pub sensor_directions: Vec<Vec3>,
    pub beam_index: Vec<u8>,
    pub azimuth_index: Vec<u16>,
}

pub fn generate_beams(pattern: &ScanPattern, rig_pose: &RigidTransform) -> RayBundle {
    let world_from_sensor = rig_pose.compose(&pattern.mount_pose);
    let origin = world_from_sensor.translation;
    let n = pattern.beam_elevations.len() * pattern.azimuth_count as usize;
    let mut out = RayBundle {
        rays: Vec::with_capacity(n),
        sensor_directions: Vec::with_capacity(n),
        beam_index: Vec::with_capacity(n),
        azimuth_index: Vec::with_capacity(n),
    };
    for (b, &el) in pattern.beam_elevations.iter().enumerate() {
        for a in 0..pattern.azimuth_count {
            let d = beam_direction(el, pattern.azimuth(a));
            let world = world_from_sensor.transform_vector(&d);
            out.rays.push(Ray::new(origin, world, pattern.min_range, pattern.max_range));
            out.sensor_directions.push(d);
            out.beam_index.push(b as u8);
            out.azimuth_index.push(a as u16);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub position: [f64; 3],
    pub range: f64,
    pub intensity: f64,
    pub seg_id: u8,
    pub beam: u8,
    pub azimuth: u16,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LidarPointCloud {
    pub points: Vec<LidarPoint>,
}

impl LidarPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarSettings {
    pub hit_alpha_min: f64,
}

impl Default for LidarSettings {
    fn default() -> Self {
        Self { hit_alpha_min: 0.5 }
    }
}

pub fn simulate_lidar(
    scene: &SplatScene,
    pattern: &ScanPattern,
    rig_pose: &RigidTransform,
    settings: &RenderSettings,
) -> Result<LidarPointCloud> {
    simulate_lidar_hybrid(scene, &[], pattern, rig_pose, settings, &LidarSettings::default())
}

/// Traces every beam against splats and meshes. A return is emitted when the
/// composited alpha reaches `hit_alpha_min`; range is the composited depth.
/// `seg_id` is 255 only when `seg_alpha_min` exceeds `hit_alpha_min`.
pub fn simulate_lidar_hybrid(
    scene: &SplatScene,
    meshes: &[MeshInstance],
    pattern: &ScanPattern,
    rig_pose: &RigidTransform,
    settings: &RenderSettings,
    lidar: &LidarSettings,
) -> Result<LidarPointCloud> {
    pattern.validate()?;
    settings.validate()?;
    let (bvh, prepared) = build_bvh(scene, settings)?;
    let beams = generate_beams(pattern, rig_pose);
    let decode = SegDecodeSettings {
        seg_alpha_min: settings.seg_alpha_min,
    };
    let lighting = LightingSettings::default();
    let points: Vec<Option<LidarPoint>> = beams
        .rays
        .par_iter()
        .enumerate()
        .map(|(i, ray)| {
            let r = trace_ray_hybrid(&bvh, &prepared, meshes, &lighting, ray, settings.k_buffer).result;
            if !(r.accumulated_alpha >= lidar.hit_alpha_min) {
                return None;
            }
            let range = r.depth;
            let d = beams.sensor_directions[i];
            let seg = decode_seg_id(&r.seg_features, r.accumulated_alpha, &decode);
            Some(LidarPoint {
                position: (d * range).into(),
                range,
                intensity: r.intensity.clamp(0.0, 1.0),
                seg_id: seg,
                beam: beams.beam_index[i],
                azimuth: beams.azimuth_index[i],
            })
        })
        .collect();
    Ok(LidarPointCloud {
        points: points.into_iter().flatten().collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Ply,
    Csv,
}

impl std::str::FromStr for CloudFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ply" => Ok(Self::Ply),
            "csv" => Ok(Self::Csv),
            _ => Err(format!("unknown point cloud format `{s}` (expected ply or csv)")),
        }
    }
}

const SCHEMA: [(&str, ScalarType); 8] = [
    ("x", ScalarType::F32),
    ("y", ScalarType::F32),
    ("z", ScalarType::F32),
    ("intensity", ScalarType::F32),
    ("seg_id", ScalarType::U8),
    ("beam", ScalarType::U8),
    ("azimuth", ScalarType::U16),
    ("range", ScalarType::F32),
];

pub fn write_point_cloud(pc: &LidarPointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        CloudFormat::Ply => ply::write_vertices(
            &mut w,
            &SCHEMA,
            pc.points.iter().map(|p| {
                vec![
                    Value::F32(p.position[0] as f32),
                    Value::F32(p.position[1] as f32),
                    Value::F32(p.position[2] as f32),
                    Value::F32(p.intensity as f32),
                    Value::U8(p.seg_id),
                    Value::U8(p.beam),
                    Value::U16(p.azimuth),
                    Value::F32(p.range as f32),
                ]
            }),
            &[],
        ),
        CloudFormat::Csv => (|| {
            writeln!(w, "x,y,z,intensity,seg_id,beam,azimuth,range")?;
            for p in &pc.points {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    p.position[0] as f32,
                    p.position[1] as f32,
                    p.position[2] as f32,
                    p.intensity as f32,
                    p.seg_id,
                    p.beam,
                    p.azimuth,
                    p.range as f32
                )?;
            }
            Ok(())
        })(),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_point_cloud_ply(path: impl AsRef<Path>) -> Result<LidarPointCloud> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = ply::read_header(&mut r)?;
    let data = ply::read_element(&mut r, &header, "vertex")?;
    let col = |n: &str| {
        data.column(n)
            .ok_or_else(|| Error::Ply(ply::PlyError::MissingProperty(n.to_string())))
    };
    let idx: Vec<usize> = SCHEMA.iter().map(|(n, _)| col(n)).collect::<Result<_>>()?;
    let points = data
        .rows
        .iter()
        .map(|row| LidarPoint {
            position: [row[idx[0]], row[idx[1]], row[idx[2]]],
            intensity: row[idx[3]],
            seg_id: row[idx[4]] as u8,
            beam: row[idx[5]] as u8,
            azimuth: row[idx[6]] as u16,
            range: row[idx[7]],
        })
        .collect();
    Ok(LidarPointCloud { points })
}
