//! Capsule-limb articulated body with an SMPL-compatible 24-bone tree.

pub mod fk;
pub mod lbs;
pub mod partition;
pub mod surface;

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fk::{axis_angle_to_matrix, forward_kinematics, matrix_to_axis_angle};
pub use lbs::lbs_transform;
pub use partition::{part_dims, partition_pose, PosePartition};
pub use surface::{capsule_weights, sample_surface, SurfaceSample};

#[derive(Debug, Error)]
pub enum RigError {
    #[error("rig has no bones")]
    Empty,
    #[error("bone {0} is the root but has a parent, or a non-root bone has none")]
    BadRoot(usize),
    #[error("bone {bone} has out-of-range parent {parent}")]
    BadParent { bone: usize, parent: usize },
    #[error("bone hierarchy contains a cycle through bone {0}")]
    Cycle(usize),
    #[error("bone {0} has a non-positive or non-finite radius")]
    BadRadius(usize),
    #[error("pose has {got} rotations, rig has {expected} bones")]
    PoseSize { expected: usize, got: usize },
    #[error("pose for frame {frame} is invalid: {reason}")]
    BadPose { frame: usize, reason: String },
    #[error("skinning weights for point {point} are off the simplex (sum {sum})")]
    OffSimplex { point: usize, sum: f64 },
    #[error("{0}")]
    Mismatch(String),
    #[error("rig file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    LeftArm,
    RightArm,
    Legs,
    Torso,
}

impl BodyPart {
    pub const ALL: [BodyPart; 4] = [BodyPart::LeftArm, BodyPart::RightArm, BodyPart::Legs, BodyPart::Torso];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bone {
    pub name: String,
    pub parent: Option<usize>,
    pub head: [f64; 3],
    pub radius: f64,
    pub part: BodyPart,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigFile {
    bones: Vec<Bone>,
}

/// Validated bone tree. Bone 0 is the root.
#[derive(Debug, Clone)]
pub struct Rig {
    bones: Vec<Bone>,
    heads: Vec<Vector3<f64>>,
    tails: Vec<Vector3<f64>>,
    order: Vec<usize>,
    children: Vec<Vec<usize>>,
    upper_legs: Option<(usize, usize)>,
}

/// Default bone table: (name, parent, head, radius, part).
///
/// Parts: left arm {13,16,18,20,22}, right arm {14,17,19,21,23},
/// legs {1,2,4,5,7,8,10,11}, torso {0,3,6,9,12,15}.
const SMPL_LIKE: [(&str, i32, [f64; 3], f64, BodyPart); 24] = [
    ("pelvis", -1, [0.0, 0.95, 0.0], 0.13, BodyPart::Torso),
    ("left_hip", 0, [0.09, 0.88, 0.0], 0.075, BodyPart::Legs),
    ("right_hip", 0, [-0.09, 0.88, 0.0], 0.075, BodyPart::Legs),
    ("spine1", 0, [0.0, 1.06, 0.0], 0.125, BodyPart::Torso),
    ("left_knee", 1, [0.10, 0.50, 0.0], 0.055, BodyPart::Legs),
    ("right_knee", 2, [-0.10, 0.50, 0.0], 0.055, BodyPart::Legs),
    ("spine2", 3, [0.0, 1.18, 0.0], 0.13, BodyPart::Torso),
    ("left_ankle", 4, [0.10, 0.09, 0.0], 0.045, BodyPart::Legs),
    ("right_ankle", 5, [-0.10, 0.09, 0.0], 0.045, BodyPart::Legs),
    ("spine3", 6, [0.0, 1.30, 0.0], 0.13, BodyPart::Torso),
    ("left_foot", 7, [0.10, 0.04, 0.09], 0.04, BodyPart::Legs),
    ("right_foot", 8, [-0.10, 0.04, 0.09], 0.04, BodyPart::Legs),
    ("neck", 9, [0.0, 1.47, 0.0], 0.05, BodyPart::Torso),
    ("left_collar", 9, [0.06, 1.42, 0.0], 0.055, BodyPart::LeftArm),
    ("right_collar", 9, [-0.06, 1.42, 0.0], 0.055, BodyPart::RightArm),
    ("head", 12, [0.0, 1.58, 0.0], 0.10, BodyPart::Torso),
    ("left_shoulder", 13, [0.18, 1.42, 0.0], 0.048, BodyPart::LeftArm),
    ("right_shoulder", 14, [-0.18, 1.42, 0.0], 0.048, BodyPart::RightArm),
    ("left_elbow", 16, [0.44, 1.42, 0.0], 0.04, BodyPart::LeftArm),
    ("right_elbow", 17, [-0.44, 1.42, 0.0], 0.04, BodyPart::RightArm),
    ("left_wrist", 18, [0.68, 1.42, 0.0], 0.033, BodyPart::LeftArm),
    ("right_wrist", 19, [-0.68, 1.42, 0.0], 0.033, BodyPart::RightArm),
    ("left_hand", 20, [0.76, 1.42, 0.0], 0.03, BodyPart::LeftArm),
    ("right_hand", 21, [-0.76, 1.42, 0.0], 0.03, BodyPart::RightArm),
];

impl Rig {
    pub fn new(bones: Vec<Bone>) -> Result<Self, RigError> {
        if bones.is_empty() {
            return Err(RigError::Empty);
        }
        let n = bones.len();
        for (i, b) in bones.iter().enumerate() {
            match (i, b.parent) {
                (0, Some(_)) => return Err(RigError::BadRoot(0)),
                (0, None) => {}
                (i, None) => return Err(RigError::BadRoot(i)),
                (i, Some(p)) if p >= n => return Err(RigError::BadParent { bone: i, parent: p }),
                _ => {}
            }
            if !(b.radius > 0.0 && b.radius.is_finite()) || b.head.iter().any(|v| !v.is_finite()) {
                return Err(RigError::BadRadius(i));
            }
        }
        // every bone must reach the root within n steps
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = bones[cur].parent {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(RigError::Cycle(start));
                }
            }
        }
        let mut children = vec![Vec::new(); n];
        for (i, b) in bones.iter().enumerate() {
            if let Some(p) = b.parent {
                children[p].push(i);
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![0usize];
        while let Some(b) = stack.pop() {
            order.push(b);
            stack.extend(children[b].iter().rev());
        }
        let heads: Vec<Vector3<f64>> = bones.iter().map(|b| Vector3::from(b.head)).collect();
        let tails = (0..n)
            .map(|i| {
                let kids = &children[i];
                let same_part: Vec<usize> = kids.iter().copied().filter(|&c| bones[c].part == bones[i].part).collect();
                if same_part.len() == 1 {
                    heads[same_part[0]]
                } else if !kids.is_empty() {
                    kids.iter().map(|&c| heads[c]).sum::<Vector3<f64>>() / kids.len() as f64
                } else if let Some(p) = bones[i].parent {
                    heads[i] + (heads[i] - heads[p]) * 0.5
                } else {
                    heads[i]
                }
            })
            .collect();
        let legs: Vec<usize> = (0..n).filter(|&i| bones[i].part == BodyPart::Legs).collect();
        let upper_legs = if legs.len() >= 2 { Some((legs[0], legs[1])) } else { None };
        Ok(Self {
            bones,
            heads,
            tails,
            order,
            children,
            upper_legs,
        })
    }

    /// The built-in 24-bone capsule body, standing in a T-pose with +y up
    /// and the character facing +z.
    pub fn smpl_like() -> Self {
        let bones = SMPL_LIKE
            .iter()
            .map(|&(name, parent, head, radius, part)| Bone {
                name: name.to_string(),
                parent: usize::try_from(parent).ok(),
                head,
                radius,
                part,
            })
            .collect();
        Self::new(bones).expect("built-in rig is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, RigError> {
        let f: RigFile = serde_json::from_str(text)?;
        Self::new(f.bones)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RigFile {
            bones: self.bones.clone(),
        })
        .expect("rig serializes")
    }

    pub fn load(path: &Path) -> Result<Self, RigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn head(&self, b: usize) -> Vector3<f64> {
        self.heads[b]
    }

    /// Far end of bone `b`'s capsule segment.
    pub fn tail(&self, b: usize) -> Vector3<f64> {
        self.tails[b]
    }

    pub fn radius(&self, b: usize) -> f64 {
        self.bones[b].radius
    }

    pub fn parent(&self, b: usize) -> Option<usize> {
        self.bones[b].parent
    }

    pub fn children(&self, b: usize) -> &[usize] {
        &self.children[b]
    }

    /// Parents-before-children traversal order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn part_bones(&self, part: BodyPart) -> Vec<usize> {
        (0..self.bones.len()).filter(|&i| self.bones[i].part == part).collect()
    }

    /// The two lowest-indexed leg bones, taken as left and right upper legs.
    pub fn upper_legs(&self) -> Option<(usize, usize)> {
        self.upper_legs
    }
}

/// Per-frame articulation: local axis-angle rotation per bone plus a root translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotations: Vec<Vector3<f64>>,
    pub root_translation: Vector3<f64>,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub frame: usize,
    pub root_t: [f64; 3],
    pub rots: Vec<[f64; 3]>,
}

impl Pose {
    pub fn rest(bones: usize) -> Self {
        Self {
            rotations: vec![Vector3::zeros(); bones],
            root_translation: Vector3::zeros(),
            frame: 0,
        }
    }

    pub fn validate(&self, rig: &Rig) -> Result<(), RigError> {
        if self.rotations.len() != rig.bone_count() {
            return Err(RigError::PoseSize {
                expected: rig.bone_count(),
                got: self.rotations.len(),
            });
        }
        let finite = self.root_translation.iter().all(|v| v.is_finite())
            && self.rotations.iter().all(|r| r.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(RigError::BadPose {
                frame: self.frame,
                reason: "non-finite value".into(),
            });
        }
        if let Some(b) = self.rotations.iter().position(|r| r.norm() >= std::f64::consts::TAU) {
            return Err(RigError::BadPose {
                frame: self.frame,
                reason: format!("bone {b} rotation magnitude ≥ 2π"),
            });
        }
        Ok(())
    }

    /// All bone rotations concatenated in bone order.
    pub fn flat(&self) -> Vec<f64> {
        self.rotations.iter().flat_map(|r| [r.x, r.y, r.z]).collect()
    }

    pub fn to_record(&self) -> PoseRecord {
        PoseRecord {
            frame: self.frame,
            root_t: self.root_translation.into(),
            rots: self.rotations.iter().map(|&r| r.into()).collect(),
        }
    }

    pub fn from_record(r: &PoseRecord) -> Self {
        Self {
            rotations: r.rots.iter().map(|&v| Vector3::from(v)).collect(),
            root_translation: Vector3::from(r.root_t),
            frame: r.frame,
        }
    }
}

pub fn poses_to_json(poses: &[Pose]) -> String {
    let recs: Vec<PoseRecord> = poses.iter().map(Pose::to_record).collect();
    serde_json::to_string(&recs).expect("poses serialize")
}

pub fn poses_from_json(text: &str, rig: &Rig) -> Result<Vec<Pose>, RigError> {
    let recs: Vec<PoseRecord> = serde_json::from_str(text)?;
    let poses: Vec<Pose> = recs.iter().map(Pose::from_record).collect();
    for p in &poses {
        p.validate(rig)?;
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_rig_tables() {
        let rig = Rig::smpl_like();
        assert_eq!(rig.bone_count(), 24);
        assert_eq!(rig.part_bones(BodyPart::LeftArm), vec![13, 16, 18, 20, 22]);
        assert_eq!(rig.part_bones(BodyPart::RightArm), vec![14, 17, 19, 21, 23]);
        assert_eq!(rig.part_bones(BodyPart::Legs), vec![1, 2, 4, 5, 7, 8, 10, 11]);
        assert_eq!(rig.part_bones(BodyPart::Torso), vec![0, 3, 6, 9, 12, 15]);
        assert_eq!(rig.upper_legs(), Some((1, 2)));
        let total: usize = BodyPart::ALL.iter().map(|&p| rig.part_bones(p).len()).sum();
        assert_eq!(total, 24);
        assert_eq!(rig.order()[0], 0);
        assert_eq!(rig.order().len(), 24);
    }

    #[test]
    fn cycle_is_rejected() {
        let mut bones = Rig::smpl_like().bones().to_vec();
        bones[3].parent = Some(6);
        assert!(matches!(Rig::new(bones), Err(RigError::Cycle(_))));
    }

    #[test]
    fn bad_root_and_parent() {
        let mut bones = Rig::smpl_like().bones().to_vec();
        bones[5].parent = None;
        assert!(matches!(Rig::new(bones), Err(RigError::BadRoot(5))));
        let mut bones = Rig::smpl_like().bones().to_vec();
        bones[5].parent = Some(99);
        assert!(matches!(Rig::new(bones), Err(RigError::BadParent { .. })));
    }

    #[test]
    fn json_round_trip() {
        let rig = Rig::smpl_like();
        let back = Rig::from_json(&rig.to_json()).unwrap();
        assert_eq!(back.bones(), rig.bones());
        let poses = vec![Pose::rest(24)];
        let p = poses_from_json(&poses_to_json(&poses), &rig).unwrap();
        assert_eq!(p, poses);
    }

    #[test]
    fn pose_validation() {
        let rig = Rig::smpl_like();
        let mut p = Pose::rest(24);
        p.rotations[3] = Vector3::new(7.0, 0.0, 0.0);
        assert!(p.validate(&rig).is_err());
        assert!(Pose::rest(23).validate(&rig).is_err());
    }
}
