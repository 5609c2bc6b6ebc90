//! Least-squares similarity alignment between corresponding point sets.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};

use crate::error::{Error, Result};
use crate::math::{RigidTransform, Similarity, Vec3};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Correspondences {
    pub source: Vec<Vec3>,
    pub target: Vec<Vec3>,
    pub weights: Option<Vec<f64>>,
}

impl Correspondences {
    pub fn new(source: Vec<Vec3>, target: Vec<Vec3>) -> Self {
        Self {
            source,
            target,
            weights: None,
        }
    }

    pub fn with_weights(mut self, w: Vec<f64>) -> Self {
        self.weights = Some(w);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.source.len();
        if n != self.target.len() {
            return Err(Error::Config(format!(
                "{} source points vs {} target points",
                n,
                self.target.len()
            )));
        }
        if n < 3 {
            return Err(Error::Degenerate(format!("need at least 3 correspondences, got {n}")));
        }
        if let Some(w) = &self.weights {
            if w.len() != n {
                return Err(Error::Config(format!("{} weights for {n} points", w.len())));
            }
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().all(|&x| x == 0.0) {
                return Err(Error::Config("weights must be finite, non-negative and not all zero".into()));
            }
        }
        if self.source.iter().chain(&self.target).any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Config("non-finite point".into()));
        }
        Ok(())
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub transform: Similarity,
    /// Weighted RMS of `s·R·src + t − tgt`.
    pub rms_residual: f64,
}

pub fn kabsch_align(c: &Correspondences, with_scale: bool) -> Result<Alignment> {
    c.validate()?;
    let n = c.source.len();
    let wsum: f64 = (0..n).map(|i| c.weight(i)).sum();
    let mu_s = (0..n).map(|i| c.source[i] * c.weight(i)).sum::<Vec3>() / wsum;
    let mu_t = (0..n).map(|i| c.target[i] * c.weight(i)).sum::<Vec3>() / wsum;

    let mut cross = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for i in 0..n {
        let w = c.weight(i);
        let ds = c.source[i] - mu_s;
        let dt = c.target[i] - mu_t;
        cross += dt * ds.transpose() * w;
        src_cov += ds * ds.transpose() * w;
        var_s += w * ds.norm_squared();
    }
    cross /= wsum;
    src_cov /= wsum;
    var_s /= wsum;

    let sv = src_cov.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().map(|v| v.max(0.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
        let rank = sv.iter().filter(|&&v| v > 1e-12 * sv[0].max(f64::MIN_POSITIVE)).count();
        return Err(Error::Degenerate(format!(
            "source points span rank {rank} (collinear or coincident); rotation is not unique"
        )));
    }

    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u.determinant() * v_t.determinant()).signum();
    let s_fix = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    // Order the smallest singular value last so the sign fix lands on it.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let perm = Matrix3::from_fn(|r, col| if order[col] == r { 1.0 } else { 0.0 });
    let u = u * perm;
    let v_t = perm.transpose() * v_t;
    let sigma = perm.transpose() * Matrix3::from_diagonal(&svd.singular_values) * perm;
    let r = u * s_fix * v_t;
    let scale = if with_scale {
        (sigma * s_fix).trace() / var_s
    } else {
        1.0
    };
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = mu_t - rot * mu_s * scale;
    let transform = Similarity {
        rotation: rot,
        translation,
        scale,
    };
    let rms_residual = ((0..n)
        .map(|i| c.weight(i) * (transform.transform_point(&c.source[i]) - c.target[i]).norm_squared())
        .sum::<f64>()
        / wsum)
        .sqrt();
    Ok(Alignment {
        transform,
        rms_residual,
    })
}

/// Maps poses into the target frame: positions by `s·R·p + t`, orientations
/// left-multiplied by `R`.
pub fn apply_similarity(transform: &Similarity, poses: &[RigidTransform]) -> Vec<RigidTransform> {
    poses
        .iter()
        .map(|p| RigidTransform::new(transform.rotation * p.rotation, transform.transform_point(&p.translation)))
        .collect()
}
