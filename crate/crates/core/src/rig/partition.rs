use super::fk::{axis_angle_to_matrix, matrix_to_axis_angle};
use super::{BodyPart, Pose, Rig};

/// Pose split into left arm, right arm, legs, torso.
///
/// `legs` ends with three extra entries: the axis-angle of
/// `R_left⁻¹ R_right` for the two upper-leg bones.
#[derive(Debug, Clone, PartialEq)]
pub struct PosePartition {
    pub left_arm: Vec<f64>,
    pub right_arm: Vec<f64>,
    pub legs: Vec<f64>,
    pub torso: Vec<f64>,
}

impl PosePartition {
    pub fn parts(&self) -> [&[f64]; 4] {
        [&self.left_arm, &self.right_arm, &self.legs, &self.torso]
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.left_arm.len(), self.right_arm.len(), self.legs.len(), self.torso.len()]
    }

    /// The four parts end to end.
    pub fn concat(&self) -> Vec<f64> {
        self.parts().concat()
    }
}

fn gather(pose: &Pose, bones: &[usize]) -> Vec<f64> {
    bones
        .iter()
        .flat_map(|&b| {
            let r = pose.rotations[b];
            [r.x, r.y, r.z]
        })
        .collect()
}

pub fn partition_pose(rig: &Rig, pose: &Pose) -> PosePartition {
    let mut legs = gather(pose, &rig.part_bones(BodyPart::Legs));
    let rel = match rig.upper_legs() {
        Some((l, r)) => {
            let rl = axis_angle_to_matrix(&pose.rotations[l]);
            let rr = axis_angle_to_matrix(&pose.rotations[r]);
            matrix_to_axis_angle(&(rl.transpose() * rr))
        }
        None => nalgebra::Vector3::zeros(),
    };
    legs.extend_from_slice(rel.as_slice());
    PosePartition {
        left_arm: gather(pose, &rig.part_bones(BodyPart::LeftArm)),
        right_arm: gather(pose, &rig.part_bones(BodyPart::RightArm)),
        legs,
        torso: gather(pose, &rig.part_bones(BodyPart::Torso)),
    }
}

/// Part dims for a rig: `[left arm, right arm, legs + 3, torso]`.
pub fn part_dims(rig: &Rig) -> [usize; 4] {
    [
        3 * rig.part_bones(BodyPart::LeftArm).len(),
        3 * rig.part_bones(BodyPart::RightArm).len(),
        3 * rig.part_bones(BodyPart::Legs).len() + 3,
        3 * rig.part_bones(BodyPart::Torso).len(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_pose_gives_zero_parts() {
        let rig = Rig::smpl_like();
        let p = partition_pose(&rig, &Pose::rest(24));
        assert_eq!(p.dims(), [15, 15, 27, 18]);
        assert_eq!(p.dims(), part_dims(&rig));
        assert!(p.concat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn left_arm_change_is_local() {
        let rig = Rig::smpl_like();
        let mut pose = Pose::rest(24);
        pose.rotations[2] = Vector3::new(0.2, 0.1, -0.3);
        pose.rotations[17] = Vector3::new(0.5, 0.0, 0.1);
        let before = partition_pose(&rig, &pose);
        pose.rotations[18] = Vector3::new(0.0, 1.1, 0.4);
        let after = partition_pose(&rig, &pose);
        assert_ne!(before.left_arm, after.left_arm);
        assert_eq!(before.right_arm, after.right_arm);
        assert_eq!(before.torso, after.torso);
        assert_eq!(before.legs, after.legs);
    }

    #[test]
    fn equal_leg_rotations_have_zero_relative_term() {
        let rig = Rig::smpl_like();
        let mut pose = Pose::rest(24);
        let r = Vector3::new(0.4, -0.2, 0.3);
        pose.rotations[1] = r;
        pose.rotations[2] = r;
        let p = partition_pose(&rig, &pose);
        let rel = &p.legs[24..];
        assert!(rel.iter().all(|v| v.abs() < 1e-12), "{rel:?}");
        assert!(p.legs[..6].iter().any(|v| v.abs() > 0.1));
    }

    #[test]
    fn relative_term_composes() {
        let rig = Rig::smpl_like();
        let mut pose = Pose::rest(24);
        pose.rotations[1] = Vector3::new(0.3, 0.0, 0.0);
        pose.rotations[2] = Vector3::new(-0.2, 0.0, 0.0);
        let rel = &partition_pose(&rig, &pose).legs[24..];
        assert!((rel[0] + 0.5).abs() < 1e-12 && rel[1].abs() < 1e-12 && rel[2].abs() < 1e-12);
    }

    #[test]
    fn parts_recover_pose_vector() {
        let rig = Rig::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = Pose {
            rotations: (0..24).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect(),
            root_translation: Vector3::zeros(),
            frame: 0,
        };
        let p = partition_pose(&rig, &pose);
        let mut recovered = vec![0.0; 72];
        let slices = [&p.left_arm[..], &p.right_arm[..], &p.legs[..24], &p.torso[..]];
        for (part, values) in BodyPart::ALL.iter().zip(slices) {
            for (k, b) in rig.part_bones(*part).into_iter().enumerate() {
                recovered[3 * b..3 * b + 3].copy_from_slice(&values[3 * k..3 * k + 3]);
            }
        }
        assert_eq!(recovered, pose.flat());
    }
}
