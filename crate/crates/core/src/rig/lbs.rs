use nalgebra::{Matrix4, Vector3};

use super::RigError;

pub const SIMPLEX_TOL: f64 = 1e-6;

pub fn check_simplex(point: usize, w: &[f64]) -> Result<(), RigError> {
    let sum: f64 = w.iter().sum();
    let inside = w.iter().all(|&v| (-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&v));
    if !inside || (sum - 1.0).abs() > SIMPLEX_TOL || !sum.is_finite() {
        return Err(RigError::OffSimplex { point, sum });
    }
    Ok(())
}

/// Linear blend skinning `x_o = Σ_b w_b B_b x_c` in homogeneous coordinates.
pub fn lbs_transform(
    points: &[Vector3<f64>],
    weights: &[Vec<f64>],
    bone_transforms: &[Matrix4<f64>],
) -> Result<Vec<Vector3<f64>>, RigError> {
    if points.len() != weights.len() {
        return Err(RigError::Mismatch(format!(
            "{} points but {} weight rows",
            points.len(),
            weights.len()
        )));
    }
    points
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (x, w))| {
            if w.len() != bone_transforms.len() {
                return Err(RigError::Mismatch(format!(
                    "weight row {i} has {} entries for {} bones",
                    w.len(),
                    bone_transforms.len()
                )));
            }
            check_simplex(i, w)?;
            let mut blend = Matrix4::zeros();
            for (wb, bt) in w.iter().zip(bone_transforms) {
                if *wb != 0.0 {
                    blend += bt * *wb;
                }
            }
            Ok((blend * x.push(1.0)).xyz())
        })
        .collect()
}
