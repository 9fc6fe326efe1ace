//! Learned skinning field and the blended rigid transform into observation space.

use nalgebra::{Matrix3, Matrix4, Vector3};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, ModelError};
use crate::nnkit::encoding::{encode_backward, encode_into, encoded_dim};
use crate::nnkit::{Activation, Mlp, NnError, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkinningConfig {
    pub width: usize,
    pub position_bands: usize,
}

impl Default for SkinningConfig {
    fn default() -> Self {
        Self {
            width: 64,
            position_bands: 4,
        }
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut w = logits.clone();
    for mut row in w.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    w
}

/// Adjoint of [`softmax_rows`] given its output.
pub fn softmax_rows_backward(weights: &Array2<f64>, d_weights: &Array2<f64>) -> Array2<f64> {
    let mut dz = Array2::zeros(weights.dim());
    for ((w, dw), mut out) in weights.rows().into_iter().zip(d_weights.rows()).zip(dz.rows_mut()) {
        let dot = w.dot(&dw);
        for k in 0..w.len() {
            out[k] = w[k] * (dw[k] - dot);
        }
    }
    dz
}

#[derive(Debug, Clone)]
struct SkinCache {
    inputs: Vec<Vector3<f64>>,
    weights: Array2<f64>,
}

/// `γ(x) → logits → softmax` over the rig's bones.
#[derive(Debug, Clone)]
pub struct SkinningNet {
    bands: usize,
    mlp: Mlp,
    cache: Vec<SkinCache>,
}

impl SkinningNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        bones: usize,
        cfg: &SkinningConfig,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mlp = Mlp::new(
            store,
            name,
            &[encoded_dim(3, cfg.position_bands), cfg.width, cfg.width, bones],
            Activation::Relu,
            Activation::Identity,
            rng,
        )?;
        Ok(Self {
            bands: cfg.position_bands,
            mlp,
            cache: Vec::new(),
        })
    }

    pub fn bone_count(&self) -> usize {
        self.mlp.out_dim()
    }

    fn encode(&self, xs: &[Vector3<f64>]) -> Array2<f64> {
        let mut e = Array2::zeros((xs.len(), encoded_dim(3, self.bands)));
        for (mut row, x) in e.rows_mut().into_iter().zip(xs) {
            encode_into(x.as_slice(), self.bands, row.as_slice_mut().expect("standard layout"));
        }
        e
    }

    pub fn weights(&self, store: &ParamStore, xs: &[Vector3<f64>]) -> Result<Array2<f64>, NnError> {
        Ok(softmax_rows(&self.mlp.infer(store, self.encode(xs).view())?))
    }

    pub fn forward(&mut self, store: &ParamStore, xs: &[Vector3<f64>]) -> Result<Array2<f64>, NnError> {
        let w = softmax_rows(&self.mlp.forward(store, self.encode(xs).view())?);
        self.cache.push(SkinCache {
            inputs: xs.to_vec(),
            weights: w.clone(),
        });
        Ok(w)
    }

    /// Returns the gradient w.r.t. the query positions.
    pub fn backward(&mut self, store: &mut ParamStore, d_weights: &Array2<f64>) -> Result<Vec<Vector3<f64>>, NnError> {
        let cache = self
            .cache
            .pop()
            .ok_or_else(|| NnError::NoForwardCache("skinning net".into()))?;
        let dz = softmax_rows_backward(&cache.weights, d_weights);
        let de = self.mlp.backward(store, dz.view())?;
        Ok(cache
            .inputs
            .iter()
            .zip(de.rows())
            .map(|(x, row)| {
                let g = encode_backward(x.as_slice(), self.bands, row.as_slice().expect("standard layout"));
                Vector3::new(g[0], g[1], g[2])
            })
            .collect())
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
        self.mlp.clear_cache();
    }
}

fn split(b: &Matrix4<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    (b.fixed_view::<3, 3>(0, 0).into_owned(), b.fixed_view::<3, 1>(0, 3).into_owned())
}

/// Weight-blended bone transform as `(linear block, translation)`.
///
/// Evaluated as `B₀ + Σ_{b≥1} w_b (B_b − B₀)`, which equals `Σ_b w_b B_b` on
/// the simplex and reproduces shared transforms exactly, whatever the
/// rounding of `Σ w_b`.
pub fn blend_transform(weights: &[f64], bones: &[Matrix4<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let (a0, t0) = split(&bones[0]);
    let mut a = a0;
    let mut t = t0;
    for (w, b) in weights.iter().zip(bones).skip(1) {
        if *w == 0.0 || *b == bones[0] {
            continue;
        }
        let (ab, tb) = split(b);
        a += (ab - a0) * *w;
        t += (tb - t0) * *w;
    }
    (a, t)
}

/// Adjoint of [`blend_transform`] w.r.t. the weights.
pub fn blend_transform_backward(bones: &[Matrix4<f64>], d_linear: &Matrix3<f64>, d_translation: &Vector3<f64>) -> Vec<f64> {
    let (a0, t0) = split(&bones[0]);
    let mut dw = vec![0.0; bones.len()];
    for (b, bt) in bones.iter().enumerate().skip(1) {
        let (ab, tb) = split(bt);
        dw[b] = (ab - a0).component_mul(d_linear).sum() + (tb - t0).dot(d_translation);
    }
    dw
}

/// Gaussians in observation space.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedGaussians {
    pub positions: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    /// Blended linear block `T₁:₃,₁:₃` per Gaussian.
    pub linear: Vec<Matrix3<f64>>,
    pub translation: Vec<Vector3<f64>>,
}

/// `x_o = A x_e + t`, `Σ_o = A Σ_e Aᵀ` with `(A, t)` from [`blend_transform`].
pub fn rigid_transform(
    positions: &[Vector3<f64>],
    covariances: &[Matrix3<f64>],
    weights: &Array2<f64>,
    bones: &[Matrix4<f64>],
) -> Result<ObservedGaussians, ModelError> {
    let n = positions.len();
    check_len("covariance count", n, covariances.len())?;
    check_len("weight rows", n, weights.nrows())?;
    check_len("weight columns", bones.len(), weights.ncols())?;
    let mut out = ObservedGaussians {
        positions: Vec::with_capacity(n),
        covariances: Vec::with_capacity(n),
        linear: Vec::with_capacity(n),
        translation: Vec::with_capacity(n),
    };
    for ((x, cov), w) in positions.iter().zip(covariances).zip(weights.rows()) {
        let (a, t) = blend_transform(w.as_slice().expect("standard layout"), bones);
        if !a.iter().chain(t.iter()).all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("blended bone transform".into()));
        }
        out.positions.push(a * x + t);
        out.covariances.push(a * cov * a.transpose());
        out.linear.push(a);
        out.translation.push(t);
    }
    Ok(out)
}

/// Gradients of [`rigid_transform`].
pub struct RigidGrad {
    pub positions: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub weights: Array2<f64>,
}

/// `d_linear` carries any extra gradient on the blended linear block (e.g.
/// from view-direction canonicalization); pass zeros if there is none.
pub fn rigid_transform_backward(
    positions: &[Vector3<f64>],
    covariances: &[Matrix3<f64>],
    observed: &ObservedGaussians,
    bones: &[Matrix4<f64>],
    d_positions: &[Vector3<f64>],
    d_covariances: &[Matrix3<f64>],
    d_linear: &[Matrix3<f64>],
) -> RigidGrad {
    let n = positions.len();
    let mut g = RigidGrad {
        positions: Vec::with_capacity(n),
        covariances: Vec::with_capacity(n),
        weights: Array2::zeros((n, bones.len())),
    };
    for i in 0..n {
        let a = observed.linear[i];
        let dx = d_positions[i];
        let dc = d_covariances[i];
        let cov = covariances[i];
        g.positions.push(a.transpose() * dx);
        g.covariances.push(a.transpose() * dc * a);
        let da = d_linear[i] + dx * positions[i].transpose() + dc * a * cov.transpose() + dc.transpose() * a * cov;
        let dw = blend_transform_backward(bones, &da, &dx);
        for (k, v) in dw.into_iter().enumerate() {
            g.weights[[i, k]] = v;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::axis_angle_to_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_bone(rng: &mut ChaCha8Rng) -> Matrix4<f64> {
        let r = axis_angle_to_matrix(&Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let mut m = r.to_homogeneous();
        m[(0, 3)] = rng.gen_range(-1.0..1.0);
        m[(1, 3)] = rng.gen_range(-1.0..1.0);
        m[(2, 3)] = rng.gen_range(-1.0..1.0);
        m
    }

    #[test]
    fn softmax_is_on_simplex() {
        let z = Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 0.0, 300.0, -200.0, 1.0]).unwrap();
        let w = softmax_rows(&z);
        for k in 0..3 {
            assert!((w[[0, k]] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((w.row(1).sum() - 1.0).abs() < 1e-15);
        assert!(w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identity_bones_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec![Vector3::new(0.1, 0.7, -0.2)];
        let cov = vec![Matrix3::new(0.3, 0.01, 0.0, 0.01, 0.2, 0.02, 0.0, 0.02, 0.1)];
        let raw: Vec<f64> = (0..24).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let w = Array2::from_shape_vec((1, 24), raw.iter().map(|v| v / total).collect()).unwrap();
        let out = rigid_transform(&x, &cov, &w, &[Matrix4::identity(); 24]).unwrap();
        assert_eq!(out.positions, x);
        assert_eq!(out.covariances, cov);
    }

    #[test]
    fn one_hot_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bones: Vec<_> = (0..4).map(|_| random_bone(&mut rng)).collect();
        let mut w = Array2::zeros((1, 4));
        w[[0, 2]] = 1.0;
        let x = vec![Vector3::new(0.3, -0.1, 0.5)];
        let re = axis_angle_to_matrix(&Vector3::new(0.2, 0.4, -0.6));
        let cov = vec![re * Matrix3::from_diagonal(&Vector3::new(0.04, 0.01, 0.09)) * re.transpose()];
        let out = rigid_transform(&x, &cov, &w, &bones).unwrap();
        let (r, t) = split(&bones[2]);
        assert!((out.positions[0] - (r * x[0] + t)).norm() < 1e-12);
        let ro = out.linear[0] * re;
        assert!((ro.transpose() * ro - re.transpose() * re).abs().max() < 1e-10);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let bones: Vec<_> = (0..6).map(|_| random_bone(&mut rng)).collect();
            let raw: Vec<f64> = (0..6).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let x = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let mut t = Matrix4::zeros();
            for (wb, b) in w.iter().zip(&bones) {
                t += b * *wb;
            }
            let out = rigid_transform(&[x], &[Matrix3::identity()], &Array2::from_shape_vec((1, 6), w).unwrap(), &bones).unwrap();
            assert!((out.positions[0] - (t * x.push(1.0)).xyz()).norm() < 1e-12);
        }
    }
}
