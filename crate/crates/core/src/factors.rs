//! Residual families of the smoothing objective and the measurement noise model.
//!
//! Every residual has the form `log(between(estimate, measurement))` (or a
//! plain vector difference for twists). The `*_jacobians` variants return
//! the residual together with its derivative with respect to a right
//! perturbation of each connected variable.

use crate::lie::{
    exp_se3, log_se3, se3_left_jacobian_inverse, se3_right_jacobian,
    se3_right_jacobian_inverse, Pose, Tangent6,
};
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("object center coincides with the camera origin")]
    DegenerateRay,
    #[error("pixel count must be at least 1 for a visibility-dependent model, got {0}")]
    InvalidPixelCount(f64),
    #[error("invalid noise parameter `{field}`: {value}")]
    InvalidParameter { field: &'static str, value: f64 },
    #[error("cannot fit a sigma model: {0}")]
    InsufficientData(String),
}

fn diag6(t: f64, r: f64) -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
}

fn check_positive(field: &'static str, value: f64) -> Result<(), FactorError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(FactorError::InvalidParameter { field, value })
    }
}

/// Standard deviations of the camera pose measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraNoise {
    /// meters
    pub sigma_ct: f64,
    /// radians
    pub sigma_cr: f64,
}

impl Default for CameraNoise {
    fn default() -> Self {
        Self {
            sigma_ct: 0.002,
            sigma_cr: 0.2f64.to_radians(),
        }
    }
}

impl CameraNoise {
    pub fn validate(&self) -> Result<(), FactorError> {
        check_positive("sigma_ct", self.sigma_ct)?;
        check_positive("sigma_cr", self.sigma_cr)
    }

    pub fn covariance(&self) -> Matrix6<f64> {
        diag6(self.sigma_ct.powi(2), self.sigma_cr.powi(2))
    }
}

/// Parameters `(a, b)` of `sigma(n_px) = a * exp(-b * n_px)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaModel {
    pub a: f64,
    #[serde(default)]
    pub b: f64,
}

impl SigmaModel {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn eval(&self, n_px: f64) -> f64 {
        sigma(n_px, self.a, self.b)
    }
}

pub fn sigma(n_px: f64, a: f64, b: f64) -> f64 {
    a * (-b * n_px).exp()
}

fn default_true() -> bool {
    true
}

/// Visibility-dependent measurement noise model.
///
/// Translation noise is specified in the ray frame C' (z-axis from camera
/// center to object center); rotation noise is isotropic in the object frame.
/// The three flags select the ablation variants: `decoupled = false` uses
/// `xy` for all translation axes, `visibility_dependent = false` drops the
/// exponential decay, `ray_aligned = false` keeps the translation block in
/// the camera axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovModelParams {
    pub xy: SigmaModel,
    pub z: SigmaModel,
    pub rot: SigmaModel,
    #[serde(default = "default_true")]
    pub decoupled: bool,
    #[serde(default = "default_true")]
    pub visibility_dependent: bool,
    #[serde(default = "default_true")]
    pub ray_aligned: bool,
}

impl Default for CovModelParams {
    fn default() -> Self {
        Self {
            xy: SigmaModel::new(0.008, 2.5e-4),
            z: SigmaModel::new(0.025, 2.5e-4),
            rot: SigmaModel::new(0.04, 2.5e-4),
            decoupled: true,
            visibility_dependent: true,
            ray_aligned: true,
        }
    }
}

impl CovModelParams {
    pub fn validate(&self) -> Result<(), FactorError> {
        for (field, m) in [("xy", self.xy), ("z", self.z), ("rot", self.rot)] {
            check_positive(field, m.a)?;
            if !(m.b >= 0.0 && m.b.is_finite()) {
                return Err(FactorError::InvalidParameter { field, value: m.b });
            }
        }
        Ok(())
    }

    /// `(sigma_xy, sigma_z, sigma_rot)` after applying the variant flags.
    pub fn sigmas(&self, n_px: f64) -> (f64, f64, f64) {
        let eval = |m: &SigmaModel| {
            if self.visibility_dependent {
                m.eval(n_px)
            } else {
                m.a
            }
        };
        let xy = eval(&self.xy);
        let z = if self.decoupled { eval(&self.z) } else { xy };
        (xy, z, eval(&self.rot))
    }
}

/// Process noise of the motion models. Variances scale with elapsed time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionNoise {
    /// constant pose, m / sqrt(s)
    pub sigma_mt: f64,
    /// constant pose, rad / sqrt(s)
    pub sigma_mr: f64,
    /// constant velocity, (m/s) / sqrt(s)
    pub sigma_vt: f64,
    /// constant velocity, (rad/s) / sqrt(s)
    pub sigma_vr: f64,
}

impl Default for MotionNoise {
    fn default() -> Self {
        Self {
            sigma_mt: 0.01,
            sigma_mr: 0.03,
            sigma_vt: 0.1,
            sigma_vr: 0.3,
        }
    }
}

impl MotionNoise {
    pub fn validate(&self) -> Result<(), FactorError> {
        check_positive("sigma_mt", self.sigma_mt)?;
        check_positive("sigma_mr", self.sigma_mr)?;
        check_positive("sigma_vt", self.sigma_vt)?;
        check_positive("sigma_vr", self.sigma_vr)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            sigma_mt: self.sigma_mt * s,
            sigma_mr: self.sigma_mr * s,
            sigma_vt: self.sigma_vt * s,
            sigma_vr: self.sigma_vr * s,
        }
    }
}

/// Variance of the integration link between consecutive poses and the twist.
pub const INTEGRATION_VARIANCE: f64 = 1e-6;

pub fn camera_residual(t_c: &Pose, t_c_meas: &Pose) -> Tangent6 {
    log_se3(&t_c.between(t_c_meas))
}

pub fn camera_jacobian(t_c: &Pose, t_c_meas: &Pose) -> (Tangent6, Matrix6<f64>) {
    let r = camera_residual(t_c, t_c_meas);
    (r, -se3_left_jacobian_inverse(&r))
}

pub fn object_residual(t_o: &Pose, t_c: &Pose, t_co_meas: &Pose) -> Tangent6 {
    log_se3(&t_o.between(&t_c.compose(t_co_meas)))
}

/// Returns the residual and its Jacobians w.r.t. `(t_o, t_c)`.
pub fn object_jacobians(
    t_o: &Pose,
    t_c: &Pose,
    t_co_meas: &Pose,
) -> (Tangent6, [Matrix6<f64>; 2]) {
    let r = object_residual(t_o, t_c, t_co_meas);
    let d_o = -se3_left_jacobian_inverse(&r);
    let d_c = se3_right_jacobian_inverse(&r) * t_co_meas.inverse().adjoint();
    (r, [d_o, d_c])
}

/// `log(Z^-1 A^-1 B)`; the constant-pose motion residual is the case `Z = I`.
pub fn between_residual(a: &Pose, b: &Pose, z: &Pose) -> Tangent6 {
    log_se3(&z.between(&a.between(b)))
}

pub fn between_jacobians(a: &Pose, b: &Pose, z: &Pose) -> (Tangent6, [Matrix6<f64>; 2]) {
    let e = a.between(b);
    let r = log_se3(&z.between(&e));
    let jr_inv = se3_right_jacobian_inverse(&r);
    let d_a = -jr_inv * e.inverse().adjoint();
    (r, [d_a, jr_inv])
}

pub fn constant_pose_residual(t_prev: &Pose, t_cur: &Pose) -> Tangent6 {
    log_se3(&t_prev.between(t_cur))
}

pub fn constant_pose_cov(noise: &MotionNoise, dt: f64) -> Result<Matrix6<f64>, FactorError> {
    check_dt(dt)?;
    Ok(diag6(noise.sigma_mt.powi(2), noise.sigma_mr.powi(2)) * dt)
}

fn check_dt(dt: f64) -> Result<(), FactorError> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(FactorError::NonPositiveDt(dt))
    }
}

pub fn smoothness_residual(x_prev: &Tangent6, x_cur: &Tangent6) -> Tangent6 {
    *x_cur - *x_prev
}

pub fn smoothness_cov(noise: &MotionNoise, dt: f64) -> Result<Matrix6<f64>, FactorError> {
    check_dt(dt)?;
    Ok(diag6(noise.sigma_vt.powi(2), noise.sigma_vr.powi(2)) * dt)
}

/// `log(T_cur^-1 T_prev exp(dt x_cur))`.
pub fn integration_residual(t_prev: &Pose, t_cur: &Pose, x_cur: &Tangent6, dt: f64) -> Tangent6 {
    log_se3(&t_cur.between(&t_prev.compose(&exp_se3(&x_cur.scale(dt)))))
}

/// Returns the residual and its Jacobians w.r.t. `(t_prev, t_cur, x_cur)`.
pub fn integration_jacobians(
    t_prev: &Pose,
    t_cur: &Pose,
    x_cur: &Tangent6,
    dt: f64,
) -> (Tangent6, [Matrix6<f64>; 3]) {
    let step = x_cur.scale(dt);
    let e = exp_se3(&step);
    let r = log_se3(&t_cur.between(&t_prev.compose(&e)));
    let jr_inv = se3_right_jacobian_inverse(&r);
    let d_prev = jr_inv * e.inverse().adjoint();
    let d_cur = -se3_left_jacobian_inverse(&r);
    let d_x = jr_inv * se3_right_jacobian(&step) * dt;
    (r, [d_prev, d_cur, d_x])
}

pub fn integration_cov(dt: f64) -> Result<Matrix6<f64>, FactorError> {
    check_dt(dt)?;
    Ok(Matrix6::identity() * (INTEGRATION_VARIANCE * dt))
}

/// Smoothness and integration residuals of the constant-velocity model.
pub fn constant_velocity_residuals(
    t_prev: &Pose,
    t_cur: &Pose,
    x_prev: &Tangent6,
    x_cur: &Tangent6,
    dt: f64,
) -> Result<(Tangent6, Tangent6), FactorError> {
    check_dt(dt)?;
    Ok((
        smoothness_residual(x_prev, x_cur),
        integration_residual(t_prev, t_cur, x_cur, dt),
    ))
}

/// Rotation `R_CC'` whose third column is the unit ray towards `p`.
pub fn ray_frame(p: &Vector3<f64>) -> Result<Matrix3<f64>, FactorError> {
    let n = p.norm();
    if !(n > 1e-9) {
        return Err(FactorError::DegenerateRay);
    }
    let z = p / n;
    let helper = if z.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let x = (helper - z * helper.dot(&z)).normalize();
    let y = z.cross(&x);
    Ok(Matrix3::from_columns(&[x, y, z]))
}

/// Covariance of the object pose measurement `t_co_meas`, expressed in the
/// object frame (the tangent space of the object residual).
pub fn measurement_covariance(
    t_co_meas: &Pose,
    n_px: f64,
    params: &CovModelParams,
) -> Result<Matrix6<f64>, FactorError> {
    if params.visibility_dependent && !(n_px >= 1.0) {
        return Err(FactorError::InvalidPixelCount(n_px));
    }
    let (s_xy, s_z, s_r) = params.sigmas(n_px);
    let diag = Matrix3::from_diagonal(&Vector3::new(s_xy * s_xy, s_xy * s_xy, s_z * s_z));
    let ray = ray_frame(&t_co_meas.translation)?;
    let in_camera = if params.ray_aligned {
        ray * diag * ray.transpose()
    } else {
        diag
    };
    let r_oc = t_co_meas.rotation_matrix().transpose();
    let mut cov = Matrix6::zeros();
    cov.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(r_oc * in_camera * r_oc.transpose()));
    cov.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() * (s_r * s_r)));
    // exact symmetry for downstream Cholesky
    Ok((cov + cov.transpose()) * 0.5)
}

/// Square-root factor `A` of [`measurement_covariance`], `Σ = A Aᵀ`, built
/// from the standard deviations directly so it exists even when the
/// variances underflow.
pub fn measurement_covariance_sqrt(
    t_co_meas: &Pose,
    n_px: f64,
    params: &CovModelParams,
) -> Result<Matrix6<f64>, FactorError> {
    if params.visibility_dependent && !(n_px >= 1.0) {
        return Err(FactorError::InvalidPixelCount(n_px));
    }
    let (s_xy, s_z, s_r) = params.sigmas(n_px);
    let scale = Matrix3::from_diagonal(&Vector3::new(s_xy, s_xy, s_z));
    let ray = ray_frame(&t_co_meas.translation)?;
    let in_camera = if params.ray_aligned { ray * scale } else { scale };
    let r_oc = t_co_meas.rotation_matrix().transpose();
    let mut a = Matrix6::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r_oc * in_camera));
    a.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() * s_r));
    Ok(a)
}

/// Result of [`fit_sigma_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaFit {
    pub a: f64,
    pub b: f64,
    /// Bins that entered the regression (bins with zero spread are skipped).
    pub bins_used: usize,
    /// True when the samples could not resolve a decay rate and `b = 0`
    /// with `a` equal to the pooled standard deviation was returned.
    pub fallback: bool,
}

impl SigmaFit {
    pub fn model(&self) -> SigmaModel {
        SigmaModel::new(self.a, self.b)
    }
}

pub const DEFAULT_FIT_BINS: usize = 10;

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Fits `sigma(n) = a exp(-b n)` to signed, zero-mean error samples.
///
/// Samples are sorted by pixel count and split into `bins` equal-population
/// bins; each bin contributes its mean pixel count and the RMS of its errors,
/// and `ln(rms) = ln(a) - b n` is solved by ordinary least squares.
pub fn fit_sigma_model(samples: &[(f64, f64)], bins: usize) -> Result<SigmaFit, FactorError> {
    if samples.is_empty() {
        return Err(FactorError::InsufficientData("no samples".into()));
    }
    if samples.iter().any(|(n, e)| !n.is_finite() || !e.is_finite() || *n < 0.0) {
        return Err(FactorError::InsufficientData(
            "samples must have finite errors and non-negative pixel counts".into(),
        ));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pooled = SigmaFit {
        a: rms(sorted.iter().map(|s| s.1)),
        b: 0.0,
        bins_used: 1,
        fallback: true,
    };
    let bins = bins.max(1).min(sorted.len());
    let mut points = Vec::with_capacity(bins);
    for k in 0..bins {
        let lo = k * sorted.len() / bins;
        let hi = (k + 1) * sorted.len() / bins;
        let chunk = &sorted[lo..hi];
        if chunk.is_empty() {
            continue;
        }
        let n_mean = chunk.iter().map(|s| s.0).sum::<f64>() / chunk.len() as f64;
        let s = rms(chunk.iter().map(|s| s.1));
        if s > 0.0 {
            points.push((n_mean, s.ln()));
        }
    }
    let first = points.first().map(|p| p.0);
    let distinct = points.iter().any(|p| Some(p.0) != first);
    if points.len() < 2 || !distinct {
        if pooled.a > 0.0 {
            return Ok(pooled);
        }
        return Err(FactorError::InsufficientData("all errors are zero".into()));
    }
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(SigmaFit {
        a: (my - slope * mx).exp(),
        b: -slope,
        bins_used: points.len(),
        fallback: false,
    })
}
