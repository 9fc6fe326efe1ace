//! Feature-space image distance from a fixed, seeded stack of strided
//! random convolutions (3 → 8 → 16 → 32 channels, stride 2, ReLU).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::LossError;

pub const MIN_SIZE: usize = 32;
pub const DEFAULT_SEED: u64 = 0x7065_7263_6570_7431;
const WIDTHS: [usize; 4] = [3, 8, 16, 32];

#[derive(Debug, Clone)]
struct Conv {
    cin: usize,
    cout: usize,
    /// `[cout][cin][3][3]`
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Channel-major feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

fn out_size(n: usize) -> usize {
    n.div_ceil(2)
}

impl Conv {
    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (w, h) = (x.width, x.height);
        let (ow, oh) = (out_size(w), out_size(h));
        let mut out = vec![0.0; self.cout * ow * oh];
        for co in 0..self.cout {
            let dst = &mut out[co * ow * oh..(co + 1) * ow * oh];
            dst.iter_mut().for_each(|v| *v = self.bias[co]);
            for ci in 0..self.cin {
                let src = &x.data[ci * w * h..(ci + 1) * w * h];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = self.weight[((co * self.cin + ci) * 3 + ky) * 3 + kx];
                        for oy in 0..oh {
                            let iy = 2 * oy + ky;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            let row = &src[(iy - 1) * w..iy * w];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = 2 * ox + kx;
                                if ix >= 1 && ix <= w {
                                    *d += k * row[ix - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        FeatureMap {
            channels: self.cout,
            width: ow,
            height: oh,
            data: out,
        }
    }

    /// Gradient on the input given the gradient on the post-ReLU output.
    fn backward(&self, x: &FeatureMap, y: &FeatureMap, dy: &[f64]) -> Vec<f64> {
        let (w, h) = (x.width, x.height);
        let (ow, oh) = (y.width, y.height);
        let mut dx = vec![0.0; x.data.len()];
        let dpre: Vec<f64> = dy.iter().zip(&y.data).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect();
        for co in 0..self.cout {
            let dsrc = &dpre[co * ow * oh..(co + 1) * ow * oh];
            for ci in 0..self.cin {
                let dst = &mut dx[ci * w * h..(ci + 1) * w * h];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = self.weight[((co * self.cin + ci) * 3 + ky) * 3 + kx];
                        for oy in 0..oh {
                            let iy = 2 * oy + ky;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            let row = &mut dst[(iy - 1) * w..iy * w];
                            for (ox, d) in dsrc[oy * ow..(oy + 1) * ow].iter().enumerate() {
                                let ix = 2 * ox + kx;
                                if ix >= 1 && ix <= w {
                                    row[ix - 1] += k * d;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct PerceptualLoss {
    convs: Vec<Conv>,
}

impl Default for PerceptualLoss {
    fn default() -> Self {
        Self::new(DEFAULT_SEED)
    }
}

fn to_channels(img: &[f64], width: usize, height: usize) -> FeatureMap {
    let mut data = vec![0.0; img.len()];
    let plane = width * height;
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = img[3 * p + c];
        }
    }
    FeatureMap {
        channels: 3,
        width,
        height,
        data,
    }
}

impl PerceptualLoss {
    /// He-uniform weights and small random biases drawn from `seed`.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = WIDTHS
            .windows(2)
            .map(|p| {
                let (cin, cout) = (p[0], p[1]);
                let bound = (6.0 / (9 * cin) as f64).sqrt();
                Conv {
                    cin,
                    cout,
                    weight: (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect(),
                    bias: (0..cout).map(|_| rng.gen_range(-0.05..0.05)).collect(),
                }
            })
            .collect();
        Self { convs }
    }

    fn check(img: &[f64], width: usize, height: usize) -> Result<(), LossError> {
        if width < MIN_SIZE || height < MIN_SIZE {
            return Err(LossError::TooSmall {
                width,
                height,
                min: MIN_SIZE,
            });
        }
        if img.len() != 3 * width * height {
            return Err(LossError::Shape {
                what: "perceptual image",
                a: img.len(),
                b: 3 * width * height,
            });
        }
        Ok(())
    }

    /// Input followed by every stage's output.
    pub fn features(&self, img: &[f64], width: usize, height: usize) -> Result<Vec<FeatureMap>, LossError> {
        Self::check(img, width, height)?;
        let mut maps = vec![to_channels(img, width, height)];
        for c in &self.convs {
            let next = c.forward(maps.last().expect("input map"));
            maps.push(next);
        }
        Ok(maps)
    }

    fn distance(a: &[FeatureMap], b: &[FeatureMap]) -> f64 {
        a[1..]
            .iter()
            .zip(&b[1..])
            .map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.data.len() as f64)
            .sum()
    }

    /// Sum over stages of the mean squared feature difference.
    pub fn loss(&self, a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64, LossError> {
        Ok(Self::distance(&self.features(a, width, height)?, &self.features(b, width, height)?))
    }

    /// Loss and its gradient w.r.t. `pred` (interleaved RGB).
    pub fn loss_grad(&self, pred: &[f64], gt: &[f64], width: usize, height: usize) -> Result<(f64, Vec<f64>), LossError> {
        let fp = self.features(pred, width, height)?;
        let fg = self.features(gt, width, height)?;
        self.grad_from_features(&fp, &fg)
    }

    /// Same as [`PerceptualLoss::loss_grad`] with the target's features precomputed.
    pub fn grad_from_features(&self, fp: &[FeatureMap], fg: &[FeatureMap]) -> Result<(f64, Vec<f64>), LossError> {
        let loss = Self::distance(fp, fg);
        let stages = self.convs.len();
        let mut d = vec![0.0; fp[stages].data.len()];
        for s in (1..=stages).rev() {
            let n = fp[s].data.len() as f64;
            for ((g, p), q) in d.iter_mut().zip(&fp[s].data).zip(&fg[s].data) {
                *g += 2.0 * (p - q) / n;
            }
            d = self.convs[s - 1].backward(&fp[s - 1], &fp[s], &d);
        }
        let plane = fp[0].width * fp[0].height;
        let mut out = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                out[3 * p + c] = d[c * plane + p];
            }
        }
        Ok((loss, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, worst_relative_error, FD_STEP};

    fn random_image(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * n * n).map(|_| rng.gen()).collect()
    }

    #[test]
    fn identity_symmetry_and_size() {
        let p = PerceptualLoss::default();
        let a = random_image(1, 32);
        let b = random_image(2, 32);
        assert_eq!(p.loss(&a, &a, 32, 32).unwrap(), 0.0);
        assert_eq!(p.loss(&a, &b, 32, 32).unwrap(), p.loss(&b, &a, 32, 32).unwrap());
        assert!(p.loss(&a, &b, 32, 32).unwrap() > 0.0);
        assert!(matches!(
            p.loss(&random_image(3, 16), &random_image(4, 16), 16, 16),
            Err(LossError::TooSmall { .. })
        ));
    }

    #[test]
    fn decreases_along_interpolation() {
        let p = PerceptualLoss::default();
        let a = random_image(5, 40);
        let b = random_image(6, 40);
        let vals: Vec<f64> = [1.0, 0.75, 0.5, 0.25, 0.0]
            .iter()
            .map(|t| {
                let x: Vec<f64> = a.iter().zip(&b).map(|(u, v)| v + t * (u - v)).collect();
                p.loss(&x, &b, 40, 40).unwrap()
            })
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
        assert_eq!(vals[4], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = PerceptualLoss::default();
        let (w, h) = (33, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..3 * w * h).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..3 * w * h).map(|_| rng.gen()).collect();
        let (_, g) = p.loss_grad(&a, &b, w, h).unwrap();
        let idx = rand::seq::index::sample(&mut rng, a.len(), 24).into_vec();
        let sub: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
        let numeric = numeric_gradient(&sub, FD_STEP, |v| {
            let mut x = a.clone();
            for (k, &i) in idx.iter().enumerate() {
                x[i] = v[k];
            }
            p.loss(&x, &b, w, h).unwrap()
        });
        let analytic: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        assert!(worst_relative_error(&analytic, &numeric) < 1e-4);
    }
}
