//! Python bindings. Images come back as flat row-major lists with their
//! shape alongside, so the module has no NumPy build dependency.

// Triggered by the pyfunction macro expansion.
#![allow(clippy::useless_conversion)]

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use splatsim::align::{kabsch_align as core_kabsch, Correspondences};
use splatsim::blocks::{interp_weights, partition as core_partition, BlockSet, PartitionConfig, Vec2};
use splatsim::buffers::FrameBuffers;
use splatsim::camera::CameraModel;
use splatsim::lidar::{simulate_lidar, ScanPattern};
use splatsim::math::{quat_wxyz, RigidTransform, Vec3};
use splatsim::modality::{decode_seg_id as core_decode, encode_seg_bits as core_encode, SegDecodeSettings};
use splatsim::raster::render_raster;
use splatsim::raytrace::render_rt;
use splatsim::scene::{load_ply, save_ply, SplatScene};
use splatsim::settings::RenderSettings;
use splatsim::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Diverged { .. } | Error::Image(_) | Error::Contract(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn pose(translation: Option<[f64; 3]>, quaternion: Option<[f64; 4]>) -> RigidTransform {
    RigidTransform::new(
        quat_wxyz(quaternion.unwrap_or([1.0, 0.0, 0.0, 0.0])),
        Vec3::from(translation.unwrap_or([0.0; 3])),
    )
}

/// Gaussian splat scene.
#[pyclass(name = "Scene", module = "splatsim_py")]
#[derive(Clone)]
struct PyScene {
    inner: SplatScene,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_ply(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_ply(&self.inner, path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn sh_degree(&self) -> u8 {
        self.inner.sh_degree
    }

    /// `(min, max)` corners of the Gaussian means, or `None` when empty.
    fn extent(&self) -> Option<([f64; 3], [f64; 3])> {
        self.inner.extent().map(|(a, b)| (a.into(), b.into()))
    }

    fn __repr__(&self) -> String {
        format!("Scene(len={}, sh_degree={})", self.inner.len(), self.inner.sh_degree)
    }
}

#[pyclass(name = "Camera", module = "splatsim_py")]
#[derive(Clone)]
struct PyCamera {
    inner: CameraModel,
}

#[pymethods]
impl PyCamera {
    #[staticmethod]
    fn pinhole(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            inner: CameraModel::pinhole(width, height, fx, fy, cx, cy),
        }
    }

    #[staticmethod]
    fn fisheye(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            inner: CameraModel::fisheye(width, height, fx, fy, cx, cy),
        }
    }

    #[staticmethod]
    fn equirectangular(width: u32, height: u32, fov_h: f64, fov_v: f64) -> Self {
        Self {
            inner: CameraModel::equirectangular(width, height, fov_h, fov_v),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CameraModel::load(path).map_err(py_err)?,
        })
    }

    /// Copy with a world-from-camera pose; quaternion is `(w, x, y, z)`.
    #[pyo3(signature = (translation=None, quaternion=None))]
    fn with_pose(&self, translation: Option<[f64; 3]>, quaternion: Option<[f64; 4]>) -> Self {
        Self {
            inner: self.inner.clone().with_pose(pose(translation, quaternion)),
        }
    }

    fn with_distortion(&self, k: [f64; 4]) -> Self {
        Self {
            inner: self.inner.clone().with_distortion(k),
        }
    }

    #[getter]
    fn width(&self) -> u32 {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height
    }

    /// Unit camera-frame direction through continuous pixel coordinates.
    fn pixel_direction(&self, u: f64, v: f64) -> [f64; 3] {
        self.inner.pixel_direction([u, v]).into()
    }

    /// Pixel coordinates of a world point, or `None` when not visible.
    fn project(&self, point: [f64; 3]) -> Option<[f64; 2]> {
        self.inner.project(&Vec3::from(point))
    }
}

#[pyclass(name = "ScanPattern", module = "splatsim_py")]
#[derive(Clone)]
struct PyScanPattern {
    inner: ScanPattern,
}

#[pymethods]
impl PyScanPattern {
    /// Elevations and azimuth bounds in degrees.
    #[new]
    #[pyo3(signature = (elevations_deg, azimuth_count, azimuth_start_deg=0.0, azimuth_end_deg=360.0, min_range=0.5, max_range=120.0))]
    fn new(
        elevations_deg: Vec<f64>,
        azimuth_count: u32,
        azimuth_start_deg: f64,
        azimuth_end_deg: f64,
        min_range: f64,
        max_range: f64,
    ) -> PyResult<Self> {
        let inner = ScanPattern {
            beam_elevations: elevations_deg.iter().map(|d| d.to_radians()).collect(),
            azimuth_count,
            azimuth_range: [azimuth_start_deg.to_radians(), azimuth_end_deg.to_radians()],
            min_range,
            max_range,
            mount_pose: RigidTransform::identity(),
        };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ScanPattern::load(path).map_err(py_err)?,
        })
    }
}

fn settings_from(backend_resort: bool, background: Option<[f64; 3]>) -> RenderSettings {
    RenderSettings {
        resort_by_t_peak: backend_resort,
        background_rgb: background.unwrap_or([0.0; 3]),
        ..RenderSettings::default()
    }
}

fn frame_dict<'py>(py: Python<'py>, fb: &FrameBuffers) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("width", fb.width)?;
    d.set_item("height", fb.height)?;
    d.set_item("rgb", fb.rgb.iter().flatten().copied().collect::<Vec<f64>>())?;
    d.set_item("depth", &fb.depth)?;
    d.set_item("normal", fb.normal.iter().flatten().copied().collect::<Vec<f64>>())?;
    d.set_item("intensity", &fb.intensity)?;
    d.set_item("alpha", &fb.alpha)?;
    d.set_item("seg_id", &fb.seg_id)?;
    Ok(d)
}

/// Renders a scene. `backend` is `"raster"` or `"rt"`. Returns a dict of
/// flat row-major channels plus `width` and `height`.
#[pyfunction]
#[pyo3(signature = (scene, camera, backend="raster", resort_by_t_peak=false, background=None))]
fn render<'py>(
    py: Python<'py>,
    scene: &PyScene,
    camera: &PyCamera,
    backend: &str,
    resort_by_t_peak: bool,
    background: Option<[f64; 3]>,
) -> PyResult<Bound<'py, PyDict>> {
    let settings = settings_from(resort_by_t_peak, background);
    let fb = py
        .allow_threads(|| match backend {
            "raster" => render_raster(&scene.inner, &camera.inner, &settings),
            "rt" => render_rt(&scene.inner, &camera.inner, &settings),
            other => Err(Error::Config(format!("unknown backend {other:?}"))),
        })
        .map_err(py_err)?;
    frame_dict(py, &fb)
}

/// LiDAR returns as a list of dicts with sensor-frame `position`, `range`,
/// `intensity`, `seg_id`, `beam` and `azimuth`.
#[pyfunction]
#[pyo3(signature = (scene, pattern, translation=None, quaternion=None))]
fn lidar<'py>(
    py: Python<'py>,
    scene: &PyScene,
    pattern: &PyScanPattern,
    translation: Option<[f64; 3]>,
    quaternion: Option<[f64; 4]>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rig = pose(translation, quaternion);
    let settings = RenderSettings::default();
    let pc = py
        .allow_threads(|| simulate_lidar(&scene.inner, &pattern.inner, &rig, &settings))
        .map_err(py_err)?;
    pc.points
        .iter()
        .map(|p| {
            let d = PyDict::new_bound(py);
            d.set_item("position", p.position)?;
            d.set_item("range", p.range)?;
            d.set_item("intensity", p.intensity)?;
            d.set_item("seg_id", p.seg_id)?;
            d.set_item("beam", p.beam)?;
            d.set_item("azimuth", p.azimuth)?;
            Ok(d)
        })
        .collect()
}

/// Similarity `target ≈ s·R·source + t`. Returns a dict with `scale`,
/// `quaternion` (w, x, y, z), `translation` and `rms_residual`.
#[pyfunction]
#[pyo3(signature = (source, target, with_scale=true, weights=None))]
fn kabsch_align<'py>(
    py: Python<'py>,
    source: Vec<[f64; 3]>,
    target: Vec<[f64; 3]>,
    with_scale: bool,
    weights: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut c = Correspondences::new(
        source.into_iter().map(Vec3::from).collect(),
        target.into_iter().map(Vec3::from).collect(),
    );
    if let Some(w) = weights {
        c = c.with_weights(w);
    }
    let a = core_kabsch(&c, with_scale).map_err(py_err)?;
    let q = a.transform.rotation;
    let d = PyDict::new_bound(py);
    d.set_item("scale", a.transform.scale)?;
    d.set_item("quaternion", [q.w, q.i, q.j, q.k])?;
    d.set_item("translation", <[f64; 3]>::from(a.transform.translation))?;
    d.set_item("rms_residual", a.rms_residual)?;
    Ok(d)
}

#[pyclass(name = "Blocks", module = "splatsim_py")]
struct PyBlocks {
    inner: BlockSet,
    labels: Vec<u32>,
}

#[pymethods]
impl PyBlocks {
    /// Cluster label per input pose.
    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.labels.clone()
    }

    #[getter]
    fn block_ids(&self) -> Vec<u32> {
        self.inner.blocks.iter().map(|b| b.id).collect()
    }

    /// Blend weights `(block_id, weight)` at a BEV position.
    fn weights(&self, x: f64, y: f64) -> Vec<(u32, f64)> {
        interp_weights(&self.inner, &Vec2::new(x, y))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }
}

/// Partitions camera positions (world x, y) into overlapping blocks.
#[pyfunction]
#[pyo3(signature = (positions, max_radius, max_images, cell_size, overlap_m, margin_m=None))]
fn partition(
    positions: Vec<[f64; 2]>,
    max_radius: f64,
    max_images: usize,
    cell_size: f64,
    overlap_m: f64,
    margin_m: Option<f64>,
) -> PyResult<PyBlocks> {
    let pts: Vec<Vec2> = positions.iter().map(|p| Vec2::new(p[0], p[1])).collect();
    let cfg = PartitionConfig {
        max_radius,
        max_images,
        cell_size,
        overlap_m,
        margin_m,
    };
    let (clusters, inner) = core_partition(&pts, &cfg).map_err(py_err)?;
    Ok(PyBlocks {
        inner,
        labels: clusters.labels,
    })
}

#[pyfunction]
fn encode_seg_bits(label: u8) -> PyResult<[f64; 6]> {
    core_encode(label).map_err(py_err)
}

/// Label from alpha-weighted bit features; 255 means no confident hit.
#[pyfunction]
fn decode_seg_id(features: [f64; 6], accumulated_alpha: f64) -> u8 {
    core_decode(&features, accumulated_alpha, &SegDecodeSettings::default())
}

#[pymodule]
fn splatsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyScanPattern>()?;
    m.add_class::<PyBlocks>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(lidar, m)?)?;
    m.add_function(wrap_pyfunction!(kabsch_align, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(encode_seg_bits, m)?)?;
    m.add_function(wrap_pyfunction!(decode_seg_id, m)?)?;
    Ok(())
}
