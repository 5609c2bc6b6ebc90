//! Gaussian primitives, the scene container and extended-PLY serialization.
//!
//! The on-disk layout follows the usual 3DGS vertex properties (`x y z`,
//! `f_dc_*`, `f_rest_*`, `opacity`, `scale_*`, `rot_*`) plus
//! `intensity_logit` and `seg_bit_0..5`. Opacity, intensity and the
//! segmentation bits are stored as logits; scales as logarithms.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion};

use crate::error::{Error, Result};
use crate::math::{sigmoid, Mat3, Similarity, Vec3};
use crate::ply::{self, PlyError, ScalarType, Value};
use crate::sh;

pub const SEG_BITS: usize = 6;

/// Smallest scale used when building covariances and precisions.
pub const MIN_SCALE: f64 = 1e-7;

const QUAT_RENORM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vec3,
    /// `[w, x, y, z]`, unit norm within 1e-6.
    pub rotation: Quaternion<f64>,
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    /// `(degree + 1)^2` RGB coefficients; index 0 is the DC term.
    pub color_sh: Vec<[f64; 3]>,
    pub intensity_logit: f64,
    pub seg_bit_logits: [f64; SEG_BITS],
}

impl Gaussian {
    /// Creates a Gaussian, renormalizing the rotation when it is off unit
    /// length by more than 1e-6.
    pub fn new(
        mean: Vec3,
        rotation: Quaternion<f64>,
        log_scale: Vec3,
        opacity_logit: f64,
        color_sh: Vec<[f64; 3]>,
    ) -> Self {
        Self {
            mean,
            rotation: normalize_quat(rotation),
            log_scale,
            opacity_logit,
            color_sh,
            intensity_logit: 0.0,
            seg_bit_logits: [0.0; SEG_BITS],
        }
    }

    /// Degree-0 Gaussian with a flat colour.
    pub fn isotropic(mean: Vec3, scale: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        Self::new(
            mean,
            Quaternion::identity(),
            Vec3::repeat(scale.ln()),
            crate::math::logit(opacity),
            vec![sh::dc_from_rgb(rgb)],
        )
    }

    pub fn scales(&self) -> Vec3 {
        self.log_scale.map(|s| s.exp().max(MIN_SCALE))
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(self.rotation)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.unit_rotation().to_rotation_matrix().into_inner()
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn intensity(&self) -> f64 {
        sigmoid(self.intensity_logit)
    }

    pub fn seg_features(&self) -> [f64; SEG_BITS] {
        self.seg_bit_logits.map(sigmoid)
    }

    /// Index of the smallest scale; ties go to the lowest index.
    pub fn min_scale_axis(&self) -> usize {
        let s = self.scales();
        let mut best = 0;
        for i in 1..3 {
            if s[i] < s[best] {
                best = i;
            }
        }
        best
    }

    /// `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Mat3 {
        let r = self.rotation_matrix();
        let s2 = Mat3::from_diagonal(&self.scales().map(|s| s * s));
        r * s2 * r.transpose()
    }

    /// Rotation column along the smallest scale axis, returned with its stored
    /// sign.
    pub fn normal(&self) -> Vec3 {
        self.rotation_matrix().column(self.min_scale_axis()).into_owned()
    }

    /// Applies a similarity to position, orientation and scale.
    pub fn transformed(&self, t: &Similarity) -> Gaussian {
        let mut g = self.clone();
        g.mean = t.transform_point(&self.mean);
        g.rotation = (t.rotation * self.unit_rotation()).into_inner();
        g.log_scale = self.log_scale.add_scalar(t.scale.ln());
        g
    }
}

fn normalize_quat(q: Quaternion<f64>) -> Quaternion<f64> {
    let n = q.norm();
    if n == 0.0 || !n.is_finite() {
        Quaternion::identity()
    } else if (n - 1.0).abs() > QUAT_RENORM_TOL {
        q / n
    } else {
        q
    }
}

/// Free-function forms used by the bindings and tests.
pub fn gaussian_normal(g: &Gaussian) -> Vec3 {
    g.normal()
}

pub fn covariance(g: &Gaussian) -> Mat3 {
    g.covariance()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatScene {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: u8,
    pub label_names: Option<BTreeMap<u8, String>>,
    pub world_from_scene: Similarity,
}

impl SplatScene {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        let sh_degree = gaussians
            .first()
            .and_then(|g| sh::degree_for_count(g.color_sh.len()))
            .unwrap_or(0);
        Self {
            gaussians,
            sh_degree,
            label_names: None,
            world_from_scene: Similarity::identity(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn ensure_renderable(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyScene)
        } else {
            Ok(())
        }
    }

    /// Gaussians mapped through `world_from_scene`.
    pub fn world_gaussians(&self) -> Vec<Gaussian> {
        if self.world_from_scene.is_identity() {
            self.gaussians.clone()
        } else {
            self.gaussians
                .iter()
                .map(|g| g.transformed(&self.world_from_scene))
                .collect()
        }
    }

    /// Axis-aligned extent of the means.
    pub fn extent(&self) -> Option<(Vec3, Vec3)> {
        let first = self.gaussians.first()?.mean;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| {
            (lo.inf(&g.mean), hi.sup(&g.mean))
        }))
    }
}

/// Sidecar path for label names: `scene.ply` → `scene.labels.json`.
pub fn labels_path(ply_path: &Path) -> PathBuf {
    let stem = ply_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ply_path.with_file_name(format!("{stem}.labels.json"))
}

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    "f_dc_0", "f_dc_1", "f_dc_2",
];

pub fn load_ply(path: impl AsRef<Path>) -> Result<SplatScene> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut scene = read_scene(&mut reader)?;

    let sidecar = labels_path(path);
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let raw: BTreeMap<String, String> =
            serde_json::from_str(&text).map_err(|e| Error::json(&sidecar, e))?;
        let mut labels = BTreeMap::new();
        for (k, v) in raw {
            let id: u8 = k
                .parse()
                .ok()
                .filter(|id| *id < 64)
                .ok_or_else(|| Error::Config(format!("label id `{k}` not in 0..63")))?;
            labels.insert(id, v);
        }
        scene.label_names = Some(labels);
    }
    Ok(scene)
}

pub fn read_scene<R: std::io::BufRead>(reader: &mut R) -> Result<SplatScene> {
    let header = ply::read_header(reader)?;
    let vertex = header
        .element("vertex")
        .ok_or_else(|| PlyError::Header("no vertex element".into()))?
        .clone();

    for name in REQUIRED {
        match vertex.scalar_type(name) {
            None => return Err(PlyError::MissingProperty(name.into()).into()),
            Some(t) if !t.is_float() => {
                return Err(PlyError::TypeMismatch {
                    property: name.into(),
                    found: t.name(),
                    expected: "float",
                }
                .into())
            }
            Some(_) => {}
        }
    }

    let mut rest_count = 0;
    while vertex.property_index(&format!("f_rest_{rest_count}")).is_some() {
        rest_count += 1;
    }
    let per_channel = rest_count / 3 + 1;
    let degree = match sh::degree_for_count(per_channel) {
        Some(d) if rest_count % 3 == 0 => d,
        _ => {
            return Err(PlyError::Header(format!(
                "{rest_count} f_rest properties do not form an SH degree 0..3"
            ))
            .into())
        }
    };

    for opt in std::iter::once("intensity_logit".to_string())
        .chain((0..SEG_BITS).map(|i| format!("seg_bit_{i}")))
        .chain((0..rest_count).map(|i| format!("f_rest_{i}")))
    {
        if let Some(t) = vertex.scalar_type(&opt) {
            if !t.is_float() {
                return Err(PlyError::TypeMismatch {
                    property: opt,
                    found: t.name(),
                    expected: "float",
                }
                .into());
            }
        }
    }

    let data = ply::read_element(reader, &header, "vertex")?;
    let col = |name: &str| data.column(name);
    let req = |name: &str| col(name).expect("checked above");
    let xyz = [req("x"), req("y"), req("z")];
    let scale = [req("scale_0"), req("scale_1"), req("scale_2")];
    let rot = [req("rot_0"), req("rot_1"), req("rot_2"), req("rot_3")];
    let dc = [req("f_dc_0"), req("f_dc_1"), req("f_dc_2")];
    let opacity = req("opacity");
    let rest: Vec<usize> = (0..rest_count)
        .map(|i| req(&format!("f_rest_{i}")))
        .collect();
    let intensity = col("intensity_logit");
    let seg: Vec<Option<usize>> = (0..SEG_BITS).map(|i| col(&format!("seg_bit_{i}"))).collect();

    let mut gaussians = Vec::with_capacity(data.rows.len());
    for (index, row) in data.rows.iter().enumerate() {
        if let Some(bad) = row.iter().position(|v| !v.is_finite()) {
            return Err(PlyError::Element {
                index,
                message: format!("non-finite value in `{}`", data.columns[bad]),
            }
            .into());
        }
        let q = Quaternion::new(row[rot[0]], row[rot[1]], row[rot[2]], row[rot[3]]);
        if q.norm() == 0.0 {
            return Err(PlyError::Element {
                index,
                message: "zero-length rotation quaternion".into(),
            }
            .into());
        }
        let mut color_sh = vec![[0.0; 3]; per_channel];
        color_sh[0] = [row[dc[0]], row[dc[1]], row[dc[2]]];
        // f_rest is channel-major: all of red, then green, then blue.
        for k in 1..per_channel {
            for ch in 0..3 {
                color_sh[k][ch] = row[rest[ch * (per_channel - 1) + (k - 1)]];
            }
        }
        let mut g = Gaussian::new(
            Vec3::new(row[xyz[0]], row[xyz[1]], row[xyz[2]]),
            q,
            Vec3::new(row[scale[0]], row[scale[1]], row[scale[2]]),
            row[opacity],
            color_sh,
        );
        g.intensity_logit = intensity.map_or(0.0, |c| row[c]);
        for (b, c) in seg.iter().enumerate() {
            g.seg_bit_logits[b] = c.map_or(0.0, |c| row[c]);
        }
        gaussians.push(g);
    }

    let mut scene = SplatScene::new(gaussians);
    scene.sh_degree = degree;
    Ok(scene)
}

fn schema(degree: u8) -> Vec<(String, ScalarType)> {
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rest = 3 * (sh::coeff_count(degree) - 1);
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.extend(
        [
            "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
            "intensity_logit",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    names.extend((0..SEG_BITS).map(|i| format!("seg_bit_{i}")));
    names.into_iter().map(|n| (n, ScalarType::F32)).collect()
}

pub fn write_scene<W: std::io::Write>(scene: &SplatScene, w: &mut W) -> std::io::Result<()> {
    let degree = scene.sh_degree;
    let per_channel = sh::coeff_count(degree);
    let schema = schema(degree);
    let schema_ref: Vec<(&str, ScalarType)> =
        schema.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let rows = scene.gaussians.iter().map(|g| {
        let f = |v: f64| Value::F32(v as f32);
        let mut row = Vec::with_capacity(schema_ref.len());
        row.extend([g.mean.x, g.mean.y, g.mean.z].map(f));
        let dc = g.color_sh.first().copied().unwrap_or([0.0; 3]);
        row.extend(dc.map(f));
        for ch in 0..3 {
            for k in 1..per_channel {
                row.push(f(g.color_sh.get(k).map_or(0.0, |c| c[ch])));
            }
        }
        row.push(f(g.opacity_logit));
        row.extend([g.log_scale.x, g.log_scale.y, g.log_scale.z].map(f));
        let q = g.rotation;
        row.extend([q.w, q.i, q.j, q.k].map(f));
        row.push(f(g.intensity_logit));
        row.extend(g.seg_bit_logits.map(f));
        row
    });
    ply::write_vertices(w, &schema_ref, rows, &[])
}

/// Writes binary-little-endian PLY, plus the label sidecar when the scene
/// carries label names.
pub fn save_ply(scene: &SplatScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_scene(scene, &mut w).map_err(|e| Error::io(path, e))?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))?;

    if let Some(labels) = &scene.label_names {
        let sidecar = labels_path(path);
        let map: BTreeMap<String, &String> =
            labels.iter().map(|(k, v)| (k.to_string(), v)).collect();
        let text = serde_json::to_string_pretty(&map).map_err(|e| Error::json(&sidecar, e))?;
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(())
}
