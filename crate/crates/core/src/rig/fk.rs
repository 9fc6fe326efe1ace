use nalgebra::{Matrix3, Matrix4, Vector3};

use super::{Pose, Rig, RigError};
use crate::gaussian::quat;

/// Rodrigues' formula. A zero vector maps to the identity exactly.
pub fn axis_angle_to_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    if theta == 0.0 {
        return Matrix3::identity();
    }
    let k = v.cross_matrix();
    if theta < 1e-8 {
        return Matrix3::identity() + k;
    }
    let kn = k / theta;
    Matrix3::identity() + kn * theta.sin() + kn * kn * (1.0 - theta.cos())
}

/// Inverse of [`axis_angle_to_matrix`] with angle in `[0, π]`.
pub fn matrix_to_axis_angle(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = quat::from_rotmat(r);
    let v = Vector3::new(q[1], q[2], q[3]);
    let s = v.norm();
    if s == 0.0 {
        return Vector3::zeros();
    }
    let angle = 2.0 * s.atan2(q[0]);
    v * (angle / s)
}

fn rigid(r: Matrix3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

/// World rotation and translation of every bone frame for `pose`.
pub(crate) fn world_frames(rig: &Rig, rotations: &[Matrix3<f64>], root_t: &Vector3<f64>) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let n = rig.bone_count();
    let mut out = vec![(Matrix3::identity(), Vector3::zeros()); n];
    for &b in rig.order() {
        out[b] = match rig.parent(b) {
            None => (rotations[b], rig.head(b) + root_t),
            Some(p) => {
                let (rp, tp) = out[p];
                let offset = rig.head(b) - rig.head(p);
                (rp * rotations[b], tp + rp * offset)
            }
        };
    }
    out
}

/// Posed-relative-to-rest bone transforms `B_b = G_b(pose) · G_b(rest)⁻¹`.
///
/// The rest frames go through the same chain arithmetic as the posed ones,
/// so the rest pose yields exact identities.
pub fn forward_kinematics(rig: &Rig, pose: &Pose) -> Result<Vec<Matrix4<f64>>, RigError> {
    pose.validate(rig)?;
    let n = rig.bone_count();
    let rots: Vec<Matrix3<f64>> = pose.rotations.iter().map(axis_angle_to_matrix).collect();
    let posed = world_frames(rig, &rots, &pose.root_translation);
    let rest = world_frames(rig, &vec![Matrix3::identity(); n], &Vector3::zeros());
    Ok(posed
        .iter()
        .zip(&rest)
        .map(|((r, t), (_, t_rest))| rigid(*r, t - r * t_rest))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, n: usize) -> Pose {
        Pose {
            rotations: (0..n)
                .map(|_| Vector3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)))
                .collect(),
            root_translation: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2), rng.gen_range(-1.0..1.0)),
            frame: 0,
        }
    }

    // Independent oracle: recursive walk that builds 4×4 world matrices
    // from local translate·rotate factors.
    fn world_oracle(rig: &Rig, pose: &Pose, b: usize) -> Matrix4<f64> {
        let local_t = match rig.parent(b) {
            None => rig.head(b) + pose.root_translation,
            Some(p) => rig.head(b) - rig.head(p),
        };
        let local = Matrix4::new_translation(&local_t) * axis_angle_to_matrix(&pose.rotations[b]).to_homogeneous();
        match rig.parent(b) {
            None => local,
            Some(p) => world_oracle(rig, pose, p) * local,
        }
    }

    #[test]
    fn rest_pose_is_exact_identity() {
        let rig = Rig::smpl_like();
        for m in forward_kinematics(&rig, &Pose::rest(24)).unwrap() {
            assert_eq!(m, Matrix4::identity());
        }
    }

    #[test]
    fn root_rotation_rotates_everything() {
        let rig = Rig::smpl_like();
        let mut pose = Pose::rest(24);
        pose.rotations[0] = Vector3::new(0.1, 1.2, -0.3);
        let r = axis_angle_to_matrix(&pose.rotations[0]);
        for m in forward_kinematics(&rig, &pose).unwrap() {
            assert!((m.fixed_view::<3, 3>(0, 0) - r).abs().max() < 1e-14);
        }
    }

    #[test]
    fn matches_recursive_oracle() {
        let rig = Rig::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let pose = random_pose(&mut rng, 24);
            let bt = forward_kinematics(&rig, &pose).unwrap();
            for b in 0..24 {
                let rest_inv = Matrix4::new_translation(&-rig.head(b));
                let want = world_oracle(&rig, &pose, b) * rest_inv;
                assert!((bt[b] - want).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn axis_angle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let v = Vector3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let back = matrix_to_axis_angle(&axis_angle_to_matrix(&v));
            assert!((back - v).norm() < 1e-10);
        }
        assert_eq!(matrix_to_axis_angle(&Matrix3::identity()), Vector3::zeros());
    }
}
