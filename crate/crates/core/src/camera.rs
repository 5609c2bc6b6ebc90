//! Pinhole (radial distortion), equidistant fisheye and equirectangular
//! cameras, plus the six-face cubemap decomposition used for wide fields of
//! view.
//!
//! Camera frame: right-handed, +z forward, +x right, +y down. Pixel
//! coordinates are continuous; pixel `(i, j)` has its centre at
//! `(i + 0.5, j + 0.5)`.

use std::f64::consts::{FRAC_PI_4, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Ray;
use crate::math::{Mat3, PoseJson, RigidTransform, Vec3};

pub const DEFAULT_NEAR: f64 = 0.05;
pub const DEFAULT_FAR: f64 = 1e4;

const SOLVE_ITERS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    Pinhole,
    #[serde(alias = "fisheye")]
    FisheyeEquidistant,
    Equirectangular,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub kind: CameraKind,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// k1..k4. Pinhole: `r(1 + k1 r² + k2 r⁴ + k3 r⁶ + k4 r⁸)`.
    /// Fisheye: `θ(1 + k1 θ² + k2 θ⁴ + k3 θ⁶ + k4 θ⁸)`.
    pub distortion: [f64; 4],
    pub fov_h: f64,
    pub fov_v: f64,
    /// World from camera.
    pub pose: RigidTransform,
    pub near: f64,
    pub far: f64,
}

impl CameraModel {
    pub fn pinhole(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            kind: CameraKind::Pinhole,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            distortion: [0.0; 4],
            fov_h: 0.0,
            fov_v: 0.0,
            pose: RigidTransform::identity(),
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    pub fn fisheye(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            kind: CameraKind::FisheyeEquidistant,
            ..Self::pinhole(width, height, fx, fy, cx, cy)
        }
    }

    pub fn equirectangular(width: u32, height: u32, fov_h: f64, fov_v: f64) -> Self {
        Self {
            kind: CameraKind::Equirectangular,
            fov_h,
            fov_v,
            ..Self::pinhole(width, height, 1.0, 1.0, 0.0, 0.0)
        }
    }

    pub fn with_pose(mut self, pose: RigidTransform) -> Self {
        self.pose = pose;
        self
    }

    pub fn with_distortion(mut self, k: [f64; 4]) -> Self {
        self.distortion = k;
        self
    }

    pub fn with_clip(mut self, near: f64, far: f64) -> Self {
        self.near = near;
        self.far = far;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::ZeroArea {
                width: self.width,
                height: self.height,
            });
        }
        match self.kind {
            CameraKind::Pinhole | CameraKind::FisheyeEquidistant => {
                if !(self.fx > 0.0 && self.fy > 0.0) {
                    return Err(Error::Config("fx and fy must be > 0".into()));
                }
            }
            CameraKind::Equirectangular => {
                if !(self.fov_h > 0.0 && self.fov_h <= 2.0 * PI + 1e-12) {
                    return Err(Error::Config("fov_h must be in (0, 2π]".into()));
                }
                if !(self.fov_v > 0.0 && self.fov_v <= PI + 1e-12) {
                    return Err(Error::Config("fov_v must be in (0, π]".into()));
                }
            }
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::Config("need 0 <= near < far".into()));
        }
        if self.kind != CameraKind::Equirectangular && self.distortion != [0.0; 4] {
            self.check_distortion_invertible()?;
        }
        Ok(())
    }

    /// The radial polynomial must be increasing up to the largest distorted
    /// radius any pixel can have.
    fn check_distortion_invertible(&self) -> Result<()> {
        let (w, h) = (self.width as f64, self.height as f64);
        let rd_max = [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]
            .iter()
            .map(|[u, v]| ((u - self.cx) / self.fx).hypot((v - self.cy) / self.fy))
            .fold(0.0, f64::max);
        let r_cap = match self.kind {
            CameraKind::FisheyeEquidistant => PI,
            _ => 1e3,
        };
        let step = 1e-3;
        let mut r = 0.0;
        while self.radial(r) < rd_max {
            if r > r_cap || self.radial_derivative(r) <= 0.0 {
                return Err(Error::Config(format!(
                    "distortion {:?} is not invertible up to image radius {rd_max:.4}",
                    self.distortion
                )));
            }
            r += step;
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn origin(&self) -> Vec3 {
        self.pose.translation
    }

    fn radial(&self, r: f64) -> f64 {
        let [k1, k2, k3, k4] = self.distortion;
        let r2 = r * r;
        r * (1.0 + r2 * (k1 + r2 * (k2 + r2 * (k3 + r2 * k4))))
    }

    fn radial_derivative(&self, r: f64) -> f64 {
        let [k1, k2, k3, k4] = self.distortion;
        let r2 = r * r;
        1.0 + r2 * (3.0 * k1 + r2 * (5.0 * k2 + r2 * (7.0 * k3 + r2 * 9.0 * k4)))
    }

    /// Inverts the radial polynomial by Newton iteration.
    fn undistort_radius(&self, rd: f64) -> f64 {
        if self.distortion == [0.0; 4] {
            return rd;
        }
        let mut r = rd;
        for _ in 0..SOLVE_ITERS {
            let f = self.radial(r) - rd;
            let step = f / self.radial_derivative(r);
            r -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        r
    }

    /// Camera-frame unit direction through continuous pixel coordinates.
    pub fn pixel_direction(&self, px: [f64; 2]) -> Vec3 {
        let [u, v] = px;
        match self.kind {
            CameraKind::Pinhole => {
                let xd = (u - self.cx) / self.fx;
                let yd = (v - self.cy) / self.fy;
                let rd = xd.hypot(yd);
                let (x, y) = if rd > 0.0 {
                    let s = self.undistort_radius(rd) / rd;
                    (xd * s, yd * s)
                } else {
                    (xd, yd)
                };
                Vec3::new(x, y, 1.0).normalize()
            }
            CameraKind::FisheyeEquidistant => {
                let xd = (u - self.cx) / self.fx;
                let yd = (v - self.cy) / self.fy;
                let theta_d = xd.hypot(yd);
                if theta_d == 0.0 {
                    return Vec3::z();
                }
                let theta = self.undistort_radius(theta_d);
                let s = theta.sin() / theta_d;
                Vec3::new(xd * s, yd * s, theta.cos())
            }
            CameraKind::Equirectangular => {
                let lon = (u / self.width as f64 - 0.5) * self.fov_h;
                let lat = (v / self.height as f64 - 0.5) * self.fov_v;
                Vec3::new(lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos())
            }
        }
    }

    pub fn in_bounds(&self, px: [f64; 2]) -> bool {
        px[0] >= 0.0 && px[1] >= 0.0 && px[0] <= self.width as f64 && px[1] <= self.height as f64
    }

    /// World-space ray through continuous pixel coordinates.
    pub fn pixel_ray(&self, px: [f64; 2]) -> Result<Ray> {
        if !self.in_bounds(px) || !px.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!(
                "pixel ({}, {}) outside {}x{} image",
                px[0], px[1], self.width, self.height
            )));
        }
        Ok(self.ray_unchecked(px))
    }

    pub(crate) fn ray_unchecked(&self, px: [f64; 2]) -> Ray {
        let d = self.pose.transform_vector(&self.pixel_direction(px));
        Ray {
            origin: self.pose.translation,
            direction: d.normalize(),
            t_min: self.near,
            t_max: self.far,
        }
    }

    /// Ray through the centre of integer pixel `(i, j)`.
    pub fn pixel_center_ray(&self, i: u32, j: u32) -> Ray {
        self.ray_unchecked([i as f64 + 0.5, j as f64 + 0.5])
    }

    /// Pixel coordinates of a camera-frame direction, ignoring image bounds.
    pub fn project_direction(&self, p: &Vec3) -> Option<[f64; 2]> {
        match self.kind {
            CameraKind::Pinhole => {
                if p.z <= 0.0 {
                    return None;
                }
                let (x, y) = (p.x / p.z, p.y / p.z);
                let r = x.hypot(y);
                let s = if r > 0.0 { self.radial(r) / r } else { 1.0 };
                Some([self.fx * x * s + self.cx, self.fy * y * s + self.cy])
            }
            CameraKind::FisheyeEquidistant => {
                let rxy = p.x.hypot(p.y);
                if rxy == 0.0 {
                    return (p.z > 0.0).then_some([self.cx, self.cy]);
                }
                let theta = rxy.atan2(p.z);
                let s = self.radial(theta) / rxy;
                Some([self.fx * p.x * s + self.cx, self.fy * p.y * s + self.cy])
            }
            CameraKind::Equirectangular => {
                let n = p.norm();
                if n == 0.0 {
                    return None;
                }
                let lon = p.x.atan2(p.z);
                let lat = (p.y / n).clamp(-1.0, 1.0).asin();
                Some([
                    (lon / self.fov_h + 0.5) * self.width as f64,
                    (lat / self.fov_v + 0.5) * self.height as f64,
                ])
            }
        }
    }

    /// Projects a world point; `None` when behind the camera or outside the
    /// image.
    pub fn project(&self, world_point: &Vec3) -> Option<[f64; 2]> {
        let p = self.pose.inverse().transform_point(world_point);
        let px = self.project_direction(&p)?;
        self.in_bounds(px).then_some(px)
    }

    /// Largest angle between the optical axis and any border pixel ray.
    pub fn max_half_angle(&self) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        let mut best: f64 = 0.0;
        let steps = 16;
        for k in 0..=steps {
            let f = k as f64 / steps as f64;
            for px in [[f * w, 0.0], [f * w, h], [0.0, f * h], [w, f * h]] {
                let d = self.pixel_direction(px);
                best = best.max(d.z.clamp(-1.0, 1.0).acos());
            }
        }
        best
    }

    /// Whether rendering goes through the six-face cubemap.
    pub fn needs_cubemap(&self) -> bool {
        match self.kind {
            CameraKind::Pinhole => 2.0 * self.max_half_angle() > 120f64.to_radians(),
            _ => true,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let json: CameraJson = crate::settings::read_json(path)?;
        let cam = CameraModel::try_from(&json)?;
        cam.validate()?;
        Ok(cam)
    }
}

/// Camera file layout.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraJson {
    pub kind: CameraKind,
    pub width: u32,
    pub height: u32,
    pub intrinsics: IntrinsicsJson,
    #[serde(default)]
    pub pose: PoseJson,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum IntrinsicsJson {
    Projective {
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        #[serde(default)]
        k1: f64,
        #[serde(default)]
        k2: f64,
        #[serde(default)]
        k3: f64,
        #[serde(default)]
        k4: f64,
    },
    Angular {
        fov_h: f64,
        fov_v: f64,
    },
}

impl TryFrom<&CameraJson> for CameraModel {
    type Error = Error;

    fn try_from(j: &CameraJson) -> Result<Self> {
        let pose = RigidTransform::from(&j.pose);
        let cam = match (j.kind, &j.intrinsics) {
            (
                CameraKind::Pinhole | CameraKind::FisheyeEquidistant,
                IntrinsicsJson::Projective {
                    fx,
                    fy,
                    cx,
                    cy,
                    k1,
                    k2,
                    k3,
                    k4,
                },
            ) => {
                let mut c = CameraModel::pinhole(j.width, j.height, *fx, *fy, *cx, *cy);
                c.kind = j.kind;
                c.distortion = [*k1, *k2, *k3, *k4];
                c
            }
            (CameraKind::Equirectangular, IntrinsicsJson::Angular { fov_h, fov_v }) => {
                CameraModel::equirectangular(j.width, j.height, *fov_h, *fov_v)
            }
            (kind, _) => {
                return Err(Error::Config(format!(
                    "intrinsics do not match camera kind {kind:?}"
                )))
            }
        };
        Ok(cam.with_pose(pose))
    }
}

impl From<&CameraModel> for CameraJson {
    fn from(c: &CameraModel) -> Self {
        let [k1, k2, k3, k4] = c.distortion;
        CameraJson {
            kind: c.kind,
            width: c.width,
            height: c.height,
            intrinsics: match c.kind {
                CameraKind::Equirectangular => IntrinsicsJson::Angular {
                    fov_h: c.fov_h,
                    fov_v: c.fov_v,
                },
                _ => IntrinsicsJson::Projective {
                    fx: c.fx,
                    fy: c.fy,
                    cx: c.cx,
                    cy: c.cy,
                    k1,
                    k2,
                    k3,
                    k4,
                },
            },
            pose: PoseJson::from(&c.pose),
        }
    }
}

/// Undistorted perspective view sharing the rig origin. Used for cubemap
/// faces and as the binning plane of the raster backend.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceCamera {
    /// Columns are the face's right, down and forward axes in the rig
    /// camera frame.
    pub camera_from_face: Mat3,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl FaceCamera {
    /// Face-frame direction through continuous face pixel coordinates.
    pub fn face_direction(&self, px: [f64; 2]) -> Vec3 {
        Vec3::new((px[0] - self.cx) / self.fx, (px[1] - self.cy) / self.fy, 1.0).normalize()
    }

    /// World ray through a face sub-pixel, using the rig camera's pose and
    /// clip range.
    pub fn ray(&self, rig: &CameraModel, px: [f64; 2]) -> Ray {
        let cam_dir = self.camera_from_face * self.face_direction(px);
        Ray {
            origin: rig.pose.translation,
            direction: rig.pose.transform_vector(&cam_dir).normalize(),
            t_min: rig.near,
            t_max: rig.far,
        }
    }

    /// Face pixel coordinates of a camera-frame direction with positive face
    /// depth.
    pub fn project_camera_dir(&self, d: &Vec3) -> Option<[f64; 2]> {
        let f = self.camera_from_face.transpose() * d;
        (f.z > 0.0).then(|| [self.fx * f.x / f.z + self.cx, self.fy * f.y / f.z + self.cy])
    }
}

/// Right, down, forward axes for the six faces: +z, -z, +x, -x, +y, -y.
const FACE_AXES: [[[f64; 3]; 3]; 6] = [
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]],
    [[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]],
    [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]],
    [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
    [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]],
];

/// Face whose forward axis dominates `d` (ties resolved in face order).
pub fn dominant_face(d: &Vec3) -> usize {
    let a = d.abs();
    if a.z >= a.x && a.z >= a.y {
        if d.z >= 0.0 {
            0
        } else {
            1
        }
    } else if a.x >= a.y {
        if d.x >= 0.0 {
            2
        } else {
            3
        }
    } else if d.y >= 0.0 {
        4
    } else {
        5
    }
}

/// Sub-pixel sample of one output pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceSample {
    pub face: u8,
    pub px: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct CubemapPlan {
    pub faces: Vec<FaceCamera>,
    pub face_size: u32,
    pub guard_deg: f64,
    /// Row-major over the output image.
    pub samples: Vec<FaceSample>,
}

impl CubemapPlan {
    pub fn new(cam: &CameraModel, guard_deg: f64) -> Self {
        let face_size = (cam.width.max(cam.height) / 2).clamp(16, 2048);
        Self::with_face_size(cam, guard_deg, face_size)
    }

    pub fn with_face_size(cam: &CameraModel, guard_deg: f64, face_size: u32) -> Self {
        let half = FRAC_PI_4 + guard_deg.to_radians();
        let n = face_size as f64;
        let f = 0.5 * n / half.tan();
        let faces: Vec<FaceCamera> = FACE_AXES
            .iter()
            .map(|cols| FaceCamera {
                camera_from_face: Mat3::from_columns(&[
                    Vec3::from(cols[0]),
                    Vec3::from(cols[1]),
                    Vec3::from(cols[2]),
                ]),
                width: face_size,
                height: face_size,
                fx: f,
                fy: f,
                cx: 0.5 * n,
                cy: 0.5 * n,
            })
            .collect();
        let mut samples = Vec::with_capacity(cam.pixel_count());
        for j in 0..cam.height {
            for i in 0..cam.width {
                let d = cam.pixel_direction([i as f64 + 0.5, j as f64 + 0.5]);
                let face = dominant_face(&d);
                let px = faces[face]
                    .project_camera_dir(&d)
                    .expect("dominant face has positive depth");
                samples.push(FaceSample {
                    face: face as u8,
                    px,
                });
            }
        }
        Self {
            faces,
            face_size,
            guard_deg,
            samples,
        }
    }

    /// Faces that receive at least one output pixel.
    pub fn referenced_faces(&self) -> [bool; 6] {
        let mut used = [false; 6];
        for s in &self.samples {
            used[s.face as usize] = true;
        }
        used
    }
}

pub fn build_cubemap_plan(cam: &CameraModel) -> CubemapPlan {
    CubemapPlan::new(cam, 2.0)
}

/// Sanity helper: a direction on the horizon `angle` radians from +z toward +x.
pub fn horizon_direction(angle: f64) -> Vec3 {
    Vec3::new(angle.sin(), 0.0, angle.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn principal_point_looks_forward() {
        let cam = CameraModel::pinhole(64, 48, 50.0, 50.0, 32.0, 24.0);
        let r = cam.pixel_ray([32.0, 24.0]).unwrap();
        assert!((r.direction - Vec3::z()).norm() < 1e-15);
        assert_eq!((r.t_min, r.t_max), (DEFAULT_NEAR, DEFAULT_FAR));
    }

    #[test]
    fn equirect_centre_and_left_edge() {
        let cam = CameraModel::equirectangular(360, 180, 2.0 * PI, PI);
        let c = cam.pixel_ray([180.0, 90.0]).unwrap();
        assert!((c.direction - Vec3::z()).norm() < 1e-15);
        let l = cam.pixel_ray([0.0, 90.0]).unwrap();
        let expected = horizon_direction(-PI);
        assert!((l.direction - expected).norm() < 1e-12);
    }

    #[test]
    fn equirect_poles_are_finite() {
        let cam = CameraModel::equirectangular(8, 4, 2.0 * PI, PI);
        for px in [[4.0, 0.0], [4.0, 4.0], [0.0, 0.0]] {
            let d = cam.pixel_ray(px).unwrap().direction;
            assert!(d.iter().all(|v| v.is_finite()));
            assert!((d.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_pixel_is_contract_violation() {
        let cam = CameraModel::pinhole(10, 10, 5.0, 5.0, 5.0, 5.0);
        assert!(matches!(
            cam.pixel_ray([10.5, 1.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn point_behind_pinhole_projects_to_nothing() {
        let cam = CameraModel::pinhole(10, 10, 5.0, 5.0, 5.0, 5.0);
        assert!(cam.project(&Vec3::new(0.0, 0.0, -1.0)).is_none());
        assert_eq!(cam.project(&Vec3::new(0.0, 0.0, 3.0)), Some([5.0, 5.0]));
    }

    #[test]
    fn pose_moves_rays() {
        let pose = RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vec3::y_axis(), FRAC_PI_2),
            Vec3::new(1.0, 2.0, 3.0),
        );
        let cam = CameraModel::pinhole(10, 10, 5.0, 5.0, 5.0, 5.0).with_pose(pose);
        let r = cam.pixel_ray([5.0, 5.0]).unwrap();
        assert!((r.origin - Vec3::new(1.0, 2.0, 3.0)).norm() < 1e-15);
        assert!((r.direction - Vec3::x()).norm() < 1e-12);
    }

    #[test]
    fn face_rotations_are_proper() {
        let plan = CubemapPlan::with_face_size(&CameraModel::equirectangular(8, 4, 2.0 * PI, PI), 2.0, 16);
        for (k, f) in plan.faces.iter().enumerate() {
            assert!((f.camera_from_face.determinant() - 1.0).abs() < 1e-12, "face {k}");
            let fwd = f.camera_from_face.column(2).into_owned();
            assert_eq!(dominant_face(&fwd), k);
        }
    }

    #[test]
    fn camera_json_round_trip() {
        let cam = CameraModel::fisheye(100, 80, 30.0, 31.0, 50.0, 40.0)
            .with_distortion([0.01, -0.002, 0.0, 0.0]);
        let json = serde_json::to_string(&CameraJson::from(&cam)).unwrap();
        let back: CameraJson = serde_json::from_str(&json).unwrap();
        assert_eq!(CameraModel::try_from(&back).unwrap(), cam);

        let text = r#"{"kind":"equirectangular","width":64,"height":32,
            "intrinsics":{"fov_h":6.283185307179586,"fov_v":3.141592653589793}}"#;
        let j: CameraJson = serde_json::from_str(text).unwrap();
        let c = CameraModel::try_from(&j).unwrap();
        assert_eq!(c.kind, CameraKind::Equirectangular);
        c.validate().unwrap();
    }

    #[test]
    fn mismatched_intrinsics_rejected() {
        let text = r#"{"kind":"pinhole","width":64,"height":32,
            "intrinsics":{"fov_h":1.0,"fov_v":1.0}}"#;
        let j: CameraJson = serde_json::from_str(text).unwrap();
        assert!(CameraModel::try_from(&j).is_err());
    }
}
