//! Canonical Gaussian cloud and its geometric algebra.

pub mod covariance;
pub mod knn;
pub mod quat;

use nalgebra::Vector3;
use thiserror::Error;

use crate::rig::{sample_surface, Rig};

pub use covariance::{build_covariance, build_covariance_backward};
pub use quat::Quat;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
    #[error("cloud arrays disagree in length: {0}")]
    Inconsistent(String),
}

/// Zeroth-order real SH constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

pub fn sh_basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Per-Gaussian attributes in canonical space.
///
/// `sh` is laid out `[gaussian][channel][basis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
    pub sh_degree: usize,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_stride(&self) -> usize {
        3 * sh_basis_count(self.sh_degree)
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[i * s..(i + 1) * s]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        crate::nnkit::sigmoid(self.opacity_logits[i])
    }

    pub fn validate(&self) -> Result<(), GaussianError> {
        let n = self.positions.len();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.sh.len() != n * self.sh_stride()
        {
            return Err(GaussianError::Inconsistent(format!("{n} positions")));
        }
        Ok(())
    }

    /// Renormalizes every quaternion in place.
    pub fn renormalize(&mut self) -> Result<(), GaussianError> {
        for q in &mut self.rotations {
            *q = quat::normalize(q)?;
        }
        Ok(())
    }
}

/// Scale used when a cloud has a single point and no neighbour distances.
pub const LONE_POINT_SCALE: f64 = 0.01;
/// Neighbours averaged for the initial isotropic scale.
pub const INIT_SCALE_NEIGHBORS: usize = 3;

/// Mid-gray DC coefficient: `SH_C0 · c = 0.5`.
pub fn mid_gray_dc() -> f64 {
    0.5 / SH_C0
}

/// Canonical cloud on the rig surface: isotropic scale from the mean
/// distance to the nearest neighbours, identity rotation, α = 0.5, mid-gray DC.
pub fn init_from_rig(rig: &Rig, n: usize, seed: u64, sh_degree: usize) -> GaussianCloud {
    let samples = sample_surface(rig, n.max(1), seed);
    let positions: Vec<Vector3<f64>> = samples.iter().map(|s| s.position).collect();
    let mean_nn = knn::mean_neighbor_distance(&positions, INIT_SCALE_NEIGHBORS);
    let log_scales = mean_nn
        .iter()
        .map(|d| {
            let d = if d.is_finite() && *d > 0.0 { *d } else { LONE_POINT_SCALE };
            Vector3::repeat(d.ln())
        })
        .collect();
    let k = sh_basis_count(sh_degree);
    let mut sh = vec![0.0; positions.len() * 3 * k];
    for g in 0..positions.len() {
        for c in 0..3 {
            sh[(g * 3 + c) * k] = mid_gray_dc();
        }
    }
    GaussianCloud {
        rotations: vec![quat::IDENTITY; positions.len()],
        opacity_logits: vec![0.0; positions.len()],
        positions,
        log_scales,
        sh,
        sh_degree,
    }
}
