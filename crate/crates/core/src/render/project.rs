use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::camera::Camera;

/// Isotropic covariance added to every projected footprint (px²).
pub const DILATION: f64 = 0.3;
/// Footprint extent in standard deviations; beyond it a splat contributes nothing.
pub const FOOTPRINT_SIGMAS: f64 = 4.0;

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    /// Dilated screen-space covariance.
    pub cov: Matrix2<f64>,
    pub depth: f64,
    /// Half-width of the axis-aligned footprint box, in pixels.
    pub radius: f64,
}

impl Splat2D {
    pub fn conic(&self) -> Option<Matrix2<f64>> {
        let det = self.cov.determinant();
        if !(det > 0.0) || !(self.cov[(0, 0)] > 0.0) {
            return None;
        }
        Some(Matrix2::new(self.cov[(1, 1)], -self.cov[(0, 1)], -self.cov[(1, 0)], self.cov[(0, 0)]) / det)
    }
}

/// Jacobian of `(fx x/z + cx, fy y/z + cy)` at a camera-space point.
pub fn projection_jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (p.x, p.y, p.z);
    Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z))
}

pub fn project_point(cam: &Camera, p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy)
}

/// Projects a world-space Gaussian. `None` when it lies outside the depth
/// range or its footprint box misses the image entirely.
pub fn project(mean: &Vector3<f64>, cov: &Matrix3<f64>, cam: &Camera) -> Option<Splat2D> {
    let p = cam.to_camera(mean);
    if !(p.z > cam.near && p.z < cam.far) {
        return None;
    }
    let w = cam.rotation();
    let j = projection_jacobian(cam, &p);
    let cov2 = j * (w * cov * w.transpose()) * j.transpose() + Matrix2::identity() * DILATION;
    let m = project_point(cam, &p);
    let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let det = cov2.determinant();
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = FOOTPRINT_SIGMAS * lambda_max.sqrt();
    if !radius.is_finite()
        || m.x + radius < 0.0
        || m.y + radius < 0.0
        || m.x - radius > cam.width as f64
        || m.y - radius > cam.height as f64
    {
        return None;
    }
    Some(Splat2D {
        mean: m,
        cov: cov2,
        depth: p.z,
        radius,
    })
}

/// Adjoint of [`project`] for a kept splat: gradients on the screen mean
/// and covariance back to the world mean and covariance.
pub fn project_backward(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    cam: &Camera,
    d_mean2: &Vector2<f64>,
    d_cov2: &Matrix2<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let w = cam.rotation();
    let p = cam.to_camera(mean);
    let (x, y, z) = (p.x, p.y, p.z);
    let j = projection_jacobian(cam, &p);
    let m = w * cov * w.transpose();
    let d_m = j.transpose() * d_cov2 * j;
    let d_cov = w.transpose() * d_m * w;
    let d_j = d_cov2 * j * m.transpose() + d_cov2.transpose() * j * m;
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut dp = Vector3::new(
        d_mean2.x * fx / z,
        d_mean2.y * fy / z,
        -d_mean2.x * fx * x / z2 - d_mean2.y * fy * y / z2,
    );
    dp.x += d_j[(0, 2)] * (-fx / z2);
    dp.y += d_j[(1, 2)] * (-fy / z2);
    dp.z += d_j[(0, 0)] * (-fx / z2)
        + d_j[(0, 2)] * (2.0 * fx * x / z3)
        + d_j[(1, 1)] * (-fy / z2)
        + d_j[(1, 2)] * (2.0 * fy * y / z3);
    (w.transpose() * dp, d_cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, worst_relative_error, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Camera {
        Camera::look_at(Vector3::new(0.3, 1.1, 3.0), Vector3::new(0.0, 0.9, 0.0), Vector3::y(), 300.0, 64, 64)
    }

    #[test]
    fn on_axis_isotropic() {
        let c = Camera::look_at(Vector3::new(0.0, 0.0, 4.0), Vector3::zeros(), Vector3::y(), 200.0, 64, 64);
        let s = project(&Vector3::zeros(), &(Matrix3::identity() * 0.01), &c).unwrap();
        assert!((s.mean - Vector2::new(32.0, 32.0)).norm() < 1e-12);
        let want = (200.0 * 0.1 / 4.0f64).powi(2) + DILATION;
        assert!((s.cov - Matrix2::identity() * want).abs().max() < 1e-10);
        assert!((s.depth - 4.0).abs() < 1e-12);
    }

    #[test]
    fn culling() {
        let c = cam();
        assert!(project(&Vector3::new(0.3, 1.1, 3.0), &Matrix3::identity(), &c).is_none());
        assert!(project(&Vector3::new(0.3, 1.1, 4.0), &(Matrix3::identity() * 1e-4), &c).is_none());
        assert!(project(&Vector3::new(40.0, 0.9, 0.0), &(Matrix3::identity() * 1e-4), &c).is_none());
    }

    #[test]
    fn covariance_matches_numeric_jacobian() {
        let c = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(0.3..1.5), rng.gen_range(-0.5..0.5));
            let a = Matrix3::from_fn(|_, _| rng.gen_range(-0.1..0.1));
            let cov = a * a.transpose();
            let s = project(&x, &cov, &c).unwrap();
            // numeric Jacobian of the world-to-pixel map
            let mut jn = Matrix2x3::zeros();
            for k in 0..3 {
                let mut p = x;
                let mut m = x;
                p[k] += 1e-6;
                m[k] -= 1e-6;
                let d = (project_point(&c, &c.to_camera(&p)) - project_point(&c, &c.to_camera(&m))) / 2e-6;
                jn.set_column(k, &d);
            }
            let want = jn * cov * jn.transpose() + Matrix2::identity() * DILATION;
            assert!((s.cov - want).abs().max() < 1e-6);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let c = cam();
        let x = Vector3::new(0.1, 0.8, 0.2);
        let a = Matrix3::new(0.05, 0.01, 0.0, -0.02, 0.04, 0.01, 0.0, 0.015, 0.03);
        let cov = a * a.transpose();
        let wm = Vector2::new(0.7, -0.4);
        let wc = Matrix2::new(0.3, 0.2, -0.1, 0.5);
        let f = |x: &Vector3<f64>, cov: &Matrix3<f64>| {
            let s = project(x, cov, &c).unwrap();
            s.mean.dot(&wm) + s.cov.component_mul(&wc).sum()
        };
        let (dx, dcov) = project_backward(&x, &cov, &c, &wm, &wc);
        let nx = numeric_gradient(x.as_slice(), FD_STEP, |v| f(&Vector3::from_column_slice(v), &cov));
        assert!(worst_relative_error(dx.as_slice(), &nx) < 1e-6);
        let nc = numeric_gradient(cov.as_slice(), FD_STEP, |v| f(&x, &Matrix3::from_column_slice(v)));
        assert!(worst_relative_error(dcov.as_slice(), &nc) < 1e-6);
    }
}
