//! Quaternions as `[w, x, y, z]` with hand-written adjoints.

use nalgebra::Matrix3;

use super::GaussianError;

pub type Quat = [f64; 4];

pub const IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn normalize(q: &Quat) -> Result<Quat, GaussianError> {
    let n = norm(q);
    if !(n > 1e-12) || !n.is_finite() {
        return Err(GaussianError::DegenerateQuaternion);
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Adjoint of `normalize`: maps a gradient on `q/|q|` to a gradient on `q`.
pub fn normalize_backward(q: &Quat, d_unit: &Quat) -> Quat {
    let n = norm(q);
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let dot = u[0] * d_unit[0] + u[1] * d_unit[1] + u[2] * d_unit[2] + u[3] * d_unit[3];
    [
        (d_unit[0] - u[0] * dot) / n,
        (d_unit[1] - u[1] * dot) / n,
        (d_unit[2] - u[2] * dot) / n,
        (d_unit[3] - u[3] * dot) / n,
    ]
}

fn unit_to_rotmat(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation matrix of `q`, renormalized first.
pub fn to_rotmat(q: &Quat) -> Result<Matrix3<f64>, GaussianError> {
    Ok(unit_to_rotmat(&normalize(q)?))
}

/// Gradient of `to_rotmat` w.r.t. the (unnormalized) quaternion.
pub fn to_rotmat_backward(q: &Quat, dr: &Matrix3<f64>) -> Quat {
    let u = match normalize(q) {
        Ok(u) => u,
        Err(_) => return [0.0; 4],
    };
    let [w, x, y, z] = u;
    let d = |r: usize, c: usize| dr[(r, c)];
    let dw = 2.0 * (-z * d(0, 1) + y * d(0, 2) + z * d(1, 0) - x * d(1, 2) - y * d(2, 0) + x * d(2, 1));
    let dx = 2.0
        * (y * d(0, 1) + z * d(0, 2) + y * d(1, 0) - 2.0 * x * d(1, 1) - w * d(1, 2) + z * d(2, 0)
            + w * d(2, 1)
            - 2.0 * x * d(2, 2));
    let dy = 2.0
        * (-2.0 * y * d(0, 0) + x * d(0, 1) + w * d(0, 2) + x * d(1, 0) + z * d(1, 2) - w * d(2, 0)
            + z * d(2, 1)
            - 2.0 * y * d(2, 2));
    let dz = 2.0
        * (-2.0 * z * d(0, 0) - w * d(0, 1) + x * d(0, 2) + w * d(1, 0) - 2.0 * z * d(1, 1)
            + y * d(1, 2)
            + x * d(2, 0)
            + y * d(2, 1));
    normalize_backward(q, &[dw, dx, dy, dz])
}

/// Hamilton product `a ⊗ b` (applies `b` first, then `a`).
pub fn mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Adjoint of [`mul`]: returns `(da, db)`.
pub fn mul_backward(a: &Quat, b: &Quat, d: &Quat) -> (Quat, Quat) {
    let da = [
        d[0] * b[0] + d[1] * b[1] + d[2] * b[2] + d[3] * b[3],
        -d[0] * b[1] + d[1] * b[0] - d[2] * b[3] + d[3] * b[2],
        -d[0] * b[2] + d[1] * b[3] + d[2] * b[0] - d[3] * b[1],
        -d[0] * b[3] - d[1] * b[2] + d[2] * b[1] + d[3] * b[0],
    ];
    let db = [
        d[0] * a[0] + d[1] * a[1] + d[2] * a[2] + d[3] * a[3],
        -d[0] * a[1] + d[1] * a[0] + d[2] * a[3] - d[3] * a[2],
        -d[0] * a[2] - d[1] * a[3] + d[2] * a[0] + d[3] * a[1],
        -d[0] * a[3] + d[1] * a[2] - d[2] * a[1] + d[3] * a[0],
    ];
    (da, db)
}

/// Quaternion from a proper rotation matrix (Shepperd's method).
pub fn from_rotmat(r: &Matrix3<f64>) -> Quat {
    let tr = r.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (r[(2, 1)] - r[(1, 2)]) / s, (r[(0, 2)] - r[(2, 0)]) / s, (r[(1, 0)] - r[(0, 1)]) / s]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [(r[(2, 1)] - r[(1, 2)]) / s, 0.25 * s, (r[(0, 1)] + r[(1, 0)]) / s, (r[(0, 2)] + r[(2, 0)]) / s]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [(r[(0, 2)] - r[(2, 0)]) / s, (r[(0, 1)] + r[(1, 0)]) / s, 0.25 * s, (r[(1, 2)] + r[(2, 1)]) / s]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [(r[(1, 0)] - r[(0, 1)]) / s, (r[(0, 2)] + r[(2, 0)]) / s, (r[(1, 2)] + r[(2, 1)]) / s, 0.25 * s]
    };
    let n = norm(&q);
    let q = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    #[test]
    fn identity_quaternion() {
        assert_eq!(to_rotmat(&IDENTITY).unwrap(), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_PI_4;
        let r = to_rotmat(&[h.cos(), 0.0, 0.0, h.sin()]).unwrap();
        let v = r * Vector3::new(1.0, 0.0, 0.0);
        assert!((v - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_quaternion_is_error() {
        assert!(to_rotmat(&[0.0; 4]).is_err());
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            prop_assume!(norm(&[w, x, y, z]) > 1e-3);
            let r = to_rotmat(&[w, x, y, z]).unwrap();
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-10);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn product_composes_rotations(a in proptest::array::uniform4(-1.0f64..1.0), b in proptest::array::uniform4(-1.0f64..1.0)) {
            prop_assume!(norm(&a) > 1e-2 && norm(&b) > 1e-2);
            let a = normalize(&a).unwrap();
            let b = normalize(&b).unwrap();
            let lhs = to_rotmat(&mul(&a, &b)).unwrap();
            let rhs = to_rotmat(&a).unwrap() * to_rotmat(&b).unwrap();
            prop_assert!((lhs - rhs).abs().max() < 1e-10);
            let back = from_rotmat(&to_rotmat(&a).unwrap());
            let same = (0..4).all(|i| (back[i] - a[i]).abs() < 1e-9) || (0..4).all(|i| (back[i] + a[i]).abs() < 1e-9);
            prop_assert!(same);
        }
    }

    #[test]
    fn rotmat_adjoint_matches_finite_differences() {
        let q = [0.7, -0.2, 0.4, 0.3];
        let dr = Matrix3::new(0.3, -1.0, 0.5, 0.2, 0.9, -0.4, 1.1, 0.05, -0.7);
        let loss = |q: &Quat| to_rotmat(q).unwrap().component_mul(&dr).sum();
        let g = to_rotmat_backward(&q, &dr);
        for i in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (loss(&qp) - loss(&qm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn mul_adjoint_matches_finite_differences() {
        let a = [0.3, 0.5, -0.2, 0.8];
        let b = [-0.6, 0.1, 0.9, 0.2];
        let d = [0.4, -0.7, 0.25, 1.0];
        let loss = |a: &Quat, b: &Quat| {
            let q = mul(a, b);
            (0..4).map(|i| q[i] * d[i]).sum::<f64>()
        };
        let (da, db) = mul_backward(&a, &b, &d);
        for i in 0..4 {
            let h = 1e-6;
            let (mut ap, mut am, mut bp, mut bm) = (a, a, b, b);
            ap[i] += h;
            am[i] -= h;
            bp[i] += h;
            bm[i] -= h;
            assert!(((loss(&ap, &b) - loss(&am, &b)) / (2.0 * h) - da[i]).abs() < 1e-9);
            assert!(((loss(&a, &bp) - loss(&a, &bm)) / (2.0 * h) - db[i]).abs() < 1e-9);
        }
    }
}
