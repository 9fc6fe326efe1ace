//! Spring-lag cloth proxy: free particles pulled toward rig-attached
//! targets, integrated with symplectic Euler at a fixed step.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::rig::{forward_kinematics, Pose, Rig};

/// Displacement from the target beyond which a simulation is declared unstable.
pub const MAX_DISPLACEMENT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClothParams {
    /// Spring constant per unit mass, s⁻².
    pub stiffness: f64,
    /// Damping per unit mass, s⁻¹.
    pub damping: f64,
    pub gravity: [f64; 3],
    pub dt: f64,
}

impl Default for ClothParams {
    fn default() -> Self {
        Self {
            stiffness: 40.0,
            damping: 6.0,
            gravity: [0.0, -9.8, 0.0],
            dt: 1.0 / 30.0,
        }
    }
}

impl ClothParams {
    fn gravity(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    /// Static sag of a particle below its target.
    pub fn sag(&self) -> Vector3<f64> {
        self.gravity() / self.stiffness
    }
}

/// A particle's target: a canonical-space point carried rigidly by one bone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bone: usize,
    pub target: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClothProxy {
    pub anchors: Vec<Anchor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClothStart {
    /// Particles at their targets, at rest.
    AtTarget,
    /// Particles hanging at the static equilibrium below their targets.
    Settled,
}

impl ClothProxy {
    /// A skirt of `rings` rings hanging from the root bone, spaced so the
    /// settled shape (targets plus sag) flares from `top_radius` at
    /// `top_height` to `bottom_radius` at `bottom_height`.
    #[allow(clippy::too_many_arguments)]
    pub fn skirt(
        particles: usize,
        rings: usize,
        top_height: f64,
        bottom_height: f64,
        top_radius: f64,
        bottom_radius: f64,
        params: &ClothParams,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rings = rings.clamp(1, particles.max(1));
        let lift = -params.sag();
        let mut anchors = Vec::with_capacity(particles);
        for i in 0..particles {
            let ring = i * rings / particles;
            let in_ring = particles * (ring + 1) / rings - particles * ring / rings;
            let k = i - particles * ring / rings;
            let t = if rings > 1 { ring as f64 / (rings - 1) as f64 } else { 0.0 };
            let y = top_height + (bottom_height - top_height) * t;
            let r = top_radius + (bottom_radius - top_radius) * t;
            let phi = TAU * (k as f64 + 0.5 * (ring % 2) as f64 + rng.gen_range(-0.1..0.1)) / in_ring as f64;
            let hang = Vector3::new(r * phi.sin(), y, r * phi.cos());
            anchors.push(Anchor { bone: 0, target: hang + lift });
        }
        Self { anchors }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// World-space targets for a pose.
    pub fn targets(&self, rig: &Rig, pose: &Pose) -> Result<Vec<Vector3<f64>>, SynthError> {
        let bones = forward_kinematics(rig, pose)?;
        self.anchors
            .iter()
            .map(|a| {
                let b = bones.get(a.bone).ok_or_else(|| SynthError::Script(format!("anchor bone {} out of range", a.bone)))?;
                Ok((b * a.target.push(1.0)).xyz())
            })
            .collect()
    }
}

/// Particle positions for every frame. Frame 0 is the start state; each
/// later frame advances one step of `params.dt` toward that frame's targets.
pub fn simulate_cloth(
    rig: &Rig,
    poses: &[Pose],
    proxy: &ClothProxy,
    params: &ClothParams,
    start: ClothStart,
) -> Result<Vec<Vec<Vector3<f64>>>, SynthError> {
    if !(params.stiffness > 0.0 && params.damping >= 0.0 && params.dt > 0.0) {
        return Err(SynthError::Unstable(
            "stiffness and dt must be positive and damping non-negative".into(),
        ));
    }
    if poses.is_empty() {
        return Ok(Vec::new());
    }
    let g = params.gravity();
    let (k, c, dt) = (params.stiffness, params.damping, params.dt);
    let first = proxy.targets(rig, &poses[0])?;
    let mut x: Vec<Vector3<f64>> = match start {
        ClothStart::AtTarget => first,
        ClothStart::Settled => first.iter().map(|t| t + params.sag()).collect(),
    };
    let mut v = vec![Vector3::zeros(); x.len()];
    let mut frames = Vec::with_capacity(poses.len());
    frames.push(x.clone());
    for (f, pose) in poses.iter().enumerate().skip(1) {
        let targets = proxy.targets(rig, pose)?;
        for i in 0..x.len() {
            let a = -(x[i] - targets[i]) * k - v[i] * c + g;
            v[i] += a * dt;
            x[i] += v[i] * dt;
            let off = (x[i] - targets[i]).norm();
            if !(off <= MAX_DISPLACEMENT) {
                return Err(SynthError::Unstable(format!(
                    "particle {i} is {off:.3} m from its target at frame {f}; \
                     keep sqrt(stiffness)·dt well below 2 and damping·dt below 1 \
                     (stiffness {k}, damping {c}, dt {dt})"
                )));
            }
        }
        frames.push(x.clone());
    }
    Ok(frames)
}
