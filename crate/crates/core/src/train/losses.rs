//! Image, mask and skinning losses, each returning its value and the
//! gradient w.r.t. its first argument.

use ndarray::Array2;

use crate::error::ModelError;
use crate::rig::SurfaceSample;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("{what}: {a} vs {b} elements")]
    Shape { what: &'static str, a: usize, b: usize },
    #[error("image {width}×{height} is smaller than {min}×{min}")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("loss component {0} is not finite")]
    NonFinite(&'static str),
}

fn same_len(what: &'static str, a: usize, b: usize) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::Shape { what, a, b });
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error over foreground pixels (`mask > 0.5`) and all
/// channels; every pixel counts when `mask` is `None`. Interleaved RGB.
pub fn l1(pred: &[f64], gt: &[f64], mask: Option<&[f64]>) -> Result<(f64, Vec<f64>), LossError> {
    same_len("l1 images", pred.len(), gt.len())?;
    if let Some(m) = mask {
        same_len("l1 mask", pred.len(), 3 * m.len())?;
    }
    let on = |p: usize| mask.is_none_or(|m| m[p] > 0.5);
    let count = (0..pred.len() / 3).filter(|&p| on(p)).count() * 3;
    let mut grad = vec![0.0; pred.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / count as f64;
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if on(i / 3) {
            let d = pred[i] - gt[i];
            sum += d.abs();
            grad[i] = sign(d) * scale;
        }
    }
    Ok((sum * scale, grad))
}

/// Mean `|alpha − mask|` over all pixels.
pub fn mask_loss(alpha: &[f64], mask: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    same_len("mask loss", alpha.len(), mask.len())?;
    if alpha.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let scale = 1.0 / alpha.len() as f64;
    let mut sum = 0.0;
    let grad = alpha
        .iter()
        .zip(mask)
        .map(|(a, m)| {
            let d = a - m;
            sum += d.abs();
            sign(d) * scale
        })
        .collect();
    Ok((sum * scale, grad))
}

/// `(1/|X|) Σ ‖w_pred − w_ref‖²` over the samples, with its gradient on `w_pred`.
pub fn skin_loss(pred: &Array2<f64>, samples: &[SurfaceSample]) -> Result<(f64, Array2<f64>), ModelError> {
    crate::error::check_len("skinning sample count", samples.len(), pred.nrows())?;
    let mut grad = Array2::zeros(pred.dim());
    if samples.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / samples.len() as f64;
    let mut sum = 0.0;
    for (i, s) in samples.iter().enumerate() {
        crate::error::check_len("reference weights", pred.ncols(), s.weights.len())?;
        for (b, w) in s.weights.iter().enumerate() {
            let d = pred[[i, b]] - w;
            sum += d * d;
            grad[[i, b]] = 2.0 * d * scale;
        }
    }
    Ok((sum * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mask: f64,
    pub perceptual: f64,
    pub skin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mask: 0.1,
            perceptual: 0.01,
            skin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if [self.mask, self.perceptual, self.skin].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Unweighted loss components of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub mask: f64,
    pub perceptual: f64,
    pub skin: f64,
}

/// `l1 + λ_mask·mask + λ_perc·perceptual + λ_skin·skin`.
pub fn total(parts: &LossParts, w: &LossWeights) -> Result<f64, LossError> {
    for (name, v) in [
        ("l1", parts.l1),
        ("mask", parts.mask),
        ("perceptual", parts.perceptual),
        ("skin", parts.skin),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    Ok(parts.l1 + w.mask * parts.mask + w.perceptual * parts.perceptual + w.skin * parts.skin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(weights: Vec<f64>) -> SurfaceSample {
        SurfaceSample {
            position: Vector3::zeros(),
            normal: Vector3::y(),
            bone: 0,
            weights,
        }
    }

    #[test]
    fn l1_cases() {
        let a = vec![0.2; 12];
        assert_eq!(l1(&a, &a, None).unwrap().0, 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        assert!((l1(&b, &a, Some(&[1.0; 4])).unwrap().0 - 0.5).abs() < 1e-15);
        assert!(l1(&a, &a[..9], None).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let g: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let m: Vec<f64> = (0..10).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let mut sum = 0.0;
        let mut count = 0.0;
        for px in 0..10 {
            if m[px] == 1.0 {
                for c in 0..3 {
                    sum += (p[3 * px + c] - g[3 * px + c]).abs();
                    count += 1.0;
                }
            }
        }
        assert!((l1(&p, &g, Some(&m)).unwrap().0 - sum / count).abs() < 1e-15);
    }

    #[test]
    fn mask_cases() {
        assert_eq!(mask_loss(&[0.0, 1.0], &[0.0, 1.0]).unwrap().0, 0.0);
        assert_eq!(mask_loss(&[0.0; 5], &[1.0; 5]).unwrap().0, 1.0);
        assert!(mask_loss(&[0.0; 5], &[1.0; 4]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..50).map(|_| rng.gen()).collect();
        let m: Vec<f64> = (0..50).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let want = a.iter().zip(&m).map(|(x, y)| (x - y).abs()).sum::<f64>() / 50.0;
        assert!((mask_loss(&a, &m).unwrap().0 - want).abs() < 1e-15);
    }

    #[test]
    fn skin_uniform_vs_one_hot() {
        let pred = Array2::from_elem((1, 24), 1.0 / 24.0);
        let mut w = vec![0.0; 24];
        w[5] = 1.0;
        let (l, _) = skin_loss(&pred, &[sample(w.clone())]).unwrap();
        assert!((l - 552.0 / 576.0).abs() < 1e-12);
        let exact = Array2::from_shape_vec((1, 24), w.clone()).unwrap();
        assert_eq!(skin_loss(&exact, &[sample(w)]).unwrap().0, 0.0);
    }

    #[test]
    fn weighted_total() {
        let p = LossParts {
            l1: 0.2,
            mask: 0.1,
            perceptual: 5.0,
            skin: 0.04,
        };
        assert!((total(&p, &LossWeights::default()).unwrap() - 0.30).abs() < 1e-12);
        let zero = LossWeights {
            mask: 0.0,
            perceptual: 0.0,
            skin: 0.0,
        };
        assert_eq!(total(&p, &zero).unwrap(), 0.2);
        let ones = LossWeights {
            mask: 1.0,
            perceptual: 1.0,
            skin: 1.0,
        };
        assert!((total(&p, &ones).unwrap() - 5.34).abs() < 1e-12);
        let bad = LossParts { perceptual: f64::NAN, ..p };
        assert_eq!(total(&bad, &ones), Err(LossError::NonFinite("perceptual")));
    }
}
