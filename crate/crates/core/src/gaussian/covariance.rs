use nalgebra::{Matrix3, Vector3};

use super::quat::{self, Quat};
use super::GaussianError;

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn build_covariance(q: &Quat, log_scale: &Vector3<f64>) -> Result<Matrix3<f64>, GaussianError> {
    let r = quat::to_rotmat(q)?;
    let m = r * Matrix3::from_diagonal(&log_scale.map(f64::exp));
    Ok(m * m.transpose())
}

/// Adjoint of [`build_covariance`] for a gradient on all nine entries of Σ.
pub fn build_covariance_backward(
    q: &Quat,
    log_scale: &Vector3<f64>,
    d_sigma: &Matrix3<f64>,
) -> Result<(Quat, Vector3<f64>), GaussianError> {
    let r = quat::to_rotmat(q)?;
    let s = log_scale.map(f64::exp);
    let m = r * Matrix3::from_diagonal(&s);
    let dm = (d_sigma + d_sigma.transpose()) * m;
    let dr = dm * Matrix3::from_diagonal(&s);
    let rt_dm = r.transpose() * dm;
    let d_log = Vector3::new(rt_dm[(0, 0)] * s[0], rt_dm[(1, 1)] * s[1], rt_dm[(2, 2)] * s[2]);
    Ok((quat::to_rotmat_backward(q, &dr), d_log))
}

/// Cholesky with a small diagonal jitter; `None` if Σ is not PSD.
pub fn is_psd(sigma: &Matrix3<f64>, jitter: f64) -> bool {
    (sigma + Matrix3::identity() * jitter).cholesky().is_some()
}
