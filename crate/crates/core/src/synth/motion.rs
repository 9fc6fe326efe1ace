//! Scripted pose tracks built from spin, sway, arm-flap and hold segments.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::rig::{Pose, Rig};

/// One timed piece of a clip. Frames are relative to the clip start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Segment {
    /// Keep the current heading with arms at rest.
    Hold { start: usize, frames: usize },
    /// Turn about the vertical axis at `rate` rad/s, easing in and out over `ease_frames`.
    Spin {
        start: usize,
        frames: usize,
        rate: f64,
        ease_frames: usize,
    },
    /// Twist back and forth around the current heading.
    Sway {
        start: usize,
        frames: usize,
        amplitude: f64,
        period_frames: f64,
    },
    /// Raise and lower both arms together.
    ArmFlap {
        start: usize,
        frames: usize,
        amplitude: f64,
        period_frames: f64,
    },
}

impl Segment {
    pub fn start(&self) -> usize {
        match *self {
            Segment::Hold { start, .. }
            | Segment::Spin { start, .. }
            | Segment::Sway { start, .. }
            | Segment::ArmFlap { start, .. } => start,
        }
    }

    pub fn frames(&self) -> usize {
        match *self {
            Segment::Hold { frames, .. }
            | Segment::Spin { frames, .. }
            | Segment::Sway { frames, .. }
            | Segment::ArmFlap { frames, .. } => frames,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Script(format!("segment at frame {}: {m}", self.start())));
        match *self {
            Segment::Spin { rate, .. } if !rate.is_finite() => bad("rate must be finite"),
            Segment::Sway {
                amplitude,
                period_frames,
                ..
            }
            | Segment::ArmFlap {
                amplitude,
                period_frames,
                ..
            } if !(amplitude.is_finite() && amplitude.abs() < PI && period_frames > 0.0) => {
                bad("amplitude must be below π and period positive")
            }
            _ if self.frames() == 0 => bad("empty segment"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipScript {
    pub name: String,
    pub frames: usize,
    pub segments: Vec<Segment>,
}

/// Bones driven by the script.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrivenBones {
    pub root: usize,
    pub left_arm: usize,
    pub right_arm: usize,
}

impl DrivenBones {
    /// Root plus the two bones named `left_shoulder` / `right_shoulder`.
    pub fn find(rig: &Rig) -> Result<Self, SynthError> {
        let by_name = |n: &str| {
            rig.bones()
                .iter()
                .position(|b| b.name == n)
                .ok_or_else(|| SynthError::Script(format!("rig has no bone named {n:?}")))
        };
        Ok(Self {
            root: 0,
            left_arm: by_name("left_shoulder")?,
            right_arm: by_name("right_shoulder")?,
        })
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Heading wrapped into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Spin speed multiplier at frame `i` of an `n`-frame segment.
fn spin_ease(i: usize, n: usize, ease: usize) -> f64 {
    if ease == 0 {
        return 1.0;
    }
    let e = ease as f64;
    smoothstep(i as f64 / e) * smoothstep((n - i) as f64 / e)
}

fn oscillation(i: usize, n: usize, amplitude: f64, period: f64) -> f64 {
    let u = i as f64 / n as f64;
    amplitude * (TAU * i as f64 / period).sin() * (PI * u).sin()
}

/// Checks that the segments tile `0..frames` without overlap or gaps.
pub fn check_segments(clip: &ClipScript) -> Result<Vec<&Segment>, SynthError> {
    let mut segs: Vec<&Segment> = clip.segments.iter().collect();
    segs.sort_by_key(|s| s.start());
    let mut cursor = 0;
    for s in &segs {
        s.validate()?;
        if s.start() < cursor {
            return Err(SynthError::Script(format!(
                "clip {:?}: segment at frame {} overlaps the previous one ending at {}",
                clip.name,
                s.start(),
                cursor
            )));
        }
        if s.start() > cursor {
            return Err(SynthError::Script(format!(
                "clip {:?}: frames {}..{} are not covered by any segment",
                clip.name,
                cursor,
                s.start()
            )));
        }
        cursor += s.frames();
    }
    if cursor != clip.frames {
        return Err(SynthError::Script(format!(
            "clip {:?}: segments cover {} frames but the clip has {}",
            clip.name, cursor, clip.frames
        )));
    }
    Ok(segs)
}

/// Pose track of one clip. Frame numbers start at `first_frame`.
pub fn generate_motion(rig: &Rig, clip: &ClipScript, fps: f64, first_frame: usize) -> Result<Vec<Pose>, SynthError> {
    let segs = check_segments(clip)?;
    if !(fps > 0.0) {
        return Err(SynthError::Script("fps must be positive".into()));
    }
    let bones = DrivenBones::find(rig)?;
    let dt = 1.0 / fps;
    let mut heading = 0.0f64;
    let mut out = Vec::with_capacity(clip.frames);
    for seg in segs {
        let n = seg.frames();
        for i in 0..n {
            let (yaw, flap) = match *seg {
                Segment::Hold { .. } => (heading, 0.0),
                Segment::Spin { .. } => (heading, 0.0),
                Segment::Sway {
                    amplitude,
                    period_frames,
                    ..
                } => (heading + oscillation(i, n, amplitude, period_frames), 0.0),
                Segment::ArmFlap {
                    amplitude,
                    period_frames,
                    ..
                } => (heading, oscillation(i, n, amplitude, period_frames)),
            };
            let mut pose = Pose::rest(rig.bone_count());
            pose.frame = first_frame + out.len();
            pose.rotations[bones.root] = Vector3::new(0.0, wrap_angle(yaw), 0.0);
            pose.rotations[bones.left_arm] = Vector3::new(0.0, 0.0, flap);
            pose.rotations[bones.right_arm] = Vector3::new(0.0, 0.0, -flap);
            out.push(pose);
            if let Segment::Spin { rate, ease_frames, .. } = *seg {
                heading += rate * spin_ease(i + 1, n, ease_frames) * dt;
            }
        }
        heading = wrap_angle(heading);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(frames: usize, segments: Vec<Segment>) -> ClipScript {
        ClipScript {
            name: "c".into(),
            frames,
            segments,
        }
    }

    #[test]
    fn hold_is_constant() {
        let rig = Rig::smpl_like();
        let poses = generate_motion(&rig, &clip(20, vec![Segment::Hold { start: 0, frames: 20 }]), 30.0, 0).unwrap();
        assert_eq!(poses.len(), 20);
        assert!(poses.iter().all(|p| p.rotations == poses[0].rotations));
    }

    #[test]
    fn steady_spin_rate() {
        let rig = Rig::smpl_like();
        let c = clip(
            60,
            vec![Segment::Spin {
                start: 0,
                frames: 60,
                rate: 2.0,
                ease_frames: 5,
            }],
        );
        let poses = generate_motion(&rig, &c, 30.0, 0).unwrap();
        for f in 10..50 {
            let d = wrap_angle(poses[f + 1].rotations[0].y - poses[f].rotations[0].y);
            assert!((d - 2.0 / 30.0).abs() < 1e-12, "{f}: {d}");
        }
        // eased start: the first step is tiny, later ones grow
        let d0 = poses[1].rotations[0].y - poses[0].rotations[0].y;
        assert!(d0 > 0.0 && d0 < 2.0 / 30.0);
    }

    #[test]
    fn spin_then_stop_holds_pose() {
        let rig = Rig::smpl_like();
        let c = clip(
            50,
            vec![
                Segment::Spin {
                    start: 0,
                    frames: 30,
                    rate: 3.0,
                    ease_frames: 4,
                },
                Segment::Hold { start: 30, frames: 20 },
            ],
        );
        let poses = generate_motion(&rig, &c, 30.0, 0).unwrap();
        for f in 30..50 {
            assert_eq!(poses[f].rotations, poses[30].rotations);
        }
        // velocity tends to zero into the stop (C¹ at the boundary)
        let last = wrap_angle(poses[30].rotations[0].y - poses[29].rotations[0].y);
        assert!(last.abs() < 0.02, "{last}");
    }

    #[test]
    fn overlapping_and_gapped_segments_fail() {
        let rig = Rig::smpl_like();
        let over = clip(
            20,
            vec![Segment::Hold { start: 0, frames: 12 }, Segment::Hold { start: 10, frames: 10 }],
        );
        assert!(generate_motion(&rig, &over, 30.0, 0).is_err());
        let gap = clip(20, vec![Segment::Hold { start: 0, frames: 5 }, Segment::Hold { start: 8, frames: 12 }]);
        assert!(generate_motion(&rig, &gap, 30.0, 0).is_err());
        let short = clip(20, vec![Segment::Hold { start: 0, frames: 5 }]);
        assert!(generate_motion(&rig, &short, 30.0, 0).is_err());
    }

    #[test]
    fn oscillations_return_to_base() {
        let rig = Rig::smpl_like();
        let c = clip(
            45,
            vec![
                Segment::Sway {
                    start: 0,
                    frames: 30,
                    amplitude: 0.4,
                    period_frames: 15.0,
                },
                Segment::ArmFlap {
                    start: 30,
                    frames: 15,
                    amplitude: 0.5,
                    period_frames: 10.0,
                },
            ],
        );
        let poses = generate_motion(&rig, &c, 30.0, 0).unwrap();
        assert_eq!(poses[0].rotations[0].y, 0.0);
        assert!(poses[29].rotations[0].y.abs() < 0.1);
        assert_eq!(poses[30].rotations[0].y, 0.0);
        let b = DrivenBones::find(&rig).unwrap();
        assert!(poses.iter().any(|p| p.rotations[b.left_arm].z > 0.25));
        assert!(poses.iter().all(|p| p.rotations[b.left_arm].z == -p.rotations[b.right_arm].z));
    }

    #[test]
    fn script_json_rejects_unknown_fields() {
        let ok = r#"{"kind":"spin","start":0,"frames":4,"rate":1.0,"ease_frames":1}"#;
        assert!(serde_json::from_str::<Segment>(ok).is_ok());
        let bad = r#"{"kind":"hold","start":0,"frames":4,"speed":1.0}"#;
        assert!(serde_json::from_str::<Segment>(bad).is_err());
    }
}
