//! View-dependent color from SH coefficients, a canonicalized view direction,
//! the per-Gaussian motion feature and a per-frame latent code.

use nalgebra::{Matrix3, Vector3};
use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, ModelError};
use crate::gaussian::sh_basis_count;
use crate::nnkit::encoding::{encode_backward, encode_into, encoded_dim};
use crate::nnkit::{Activation, Mlp, NnError, ParamGroup, ParamId, ParamStore};

const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Real SH basis up to degree 3 at a unit direction, with the gradient of
/// each basis function w.r.t. the direction's components.
pub fn sh_basis(d: &Vector3<f64>, degree: usize) -> (Vec<f64>, Vec<[f64; 3]>) {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut v = vec![crate::gaussian::SH_C0];
    let mut g = vec![[0.0; 3]];
    if degree >= 1 {
        v.extend([-C1 * y, C1 * z, -C1 * x]);
        g.extend([[0.0, -C1, 0.0], [0.0, 0.0, C1], [-C1, 0.0, 0.0]]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        v.extend([
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2.0 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]);
        g.extend([
            [C2[0] * y, C2[0] * x, 0.0],
            [0.0, C2[1] * z, C2[1] * y],
            [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z],
            [C2[3] * z, 0.0, C2[3] * x],
            [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0],
        ]);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        v.extend([
            C3[0] * y * (3.0 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4.0 * zz - xx - yy),
            C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            C3[4] * x * (4.0 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3.0 * yy),
        ]);
        g.extend([
            [6.0 * C3[0] * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0],
            [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y],
            [-2.0 * C3[2] * x * y, C3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * C3[2] * y * z],
            [-6.0 * C3[3] * x * z, -6.0 * C3[3] * y * z, C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)],
            [C3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * C3[4] * x * y, 8.0 * C3[4] * x * z],
            [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)],
            [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0],
        ]);
    }
    (v, g)
}

/// Condition above which the inverse is replaced by the transpose.
pub const MAX_CONDITION: f64 = 1e6;

/// Frobenius-norm condition estimate `‖A‖ ‖A⁻¹‖`, infinite if singular.
pub fn condition_estimate(a: &Matrix3<f64>) -> f64 {
    a.try_inverse().map_or(f64::INFINITY, |inv| a.norm() * inv.norm())
}

fn back_map(a: &Matrix3<f64>) -> (Matrix3<f64>, bool) {
    match a.try_inverse() {
        Some(inv) if a.norm() * inv.norm() <= MAX_CONDITION => (inv, true),
        _ => (a.transpose(), false),
    }
}

/// `normalize(A⁻¹ d)`, or `normalize(Aᵀ d)` when `A` is ill-conditioned.
pub fn canonicalize_view_dir(d: &Vector3<f64>, a: &Matrix3<f64>) -> Result<Vector3<f64>, ModelError> {
    let u = back_map(a).0 * d;
    let n = u.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(ModelError::ZeroDirection);
    }
    Ok(u / n)
}

/// Adjoint of [`canonicalize_view_dir`]: returns `(d_d, d_A)`.
pub fn canonicalize_view_dir_backward(
    d: &Vector3<f64>,
    a: &Matrix3<f64>,
    d_out: &Vector3<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let (m, inverted) = back_map(a);
    let u = m * d;
    let n = u.norm();
    let unit = u / n;
    let du = (d_out - unit * unit.dot(d_out)) / n;
    let dm = du * d.transpose();
    let da = if inverted { -m.transpose() * dm * m.transpose() } else { dm.transpose() };
    (m.transpose() * du, da)
}

/// `normalize(x − eye)` and its adjoint w.r.t. `x`.
pub fn view_direction(x: &Vector3<f64>, eye: &Vector3<f64>) -> Result<Vector3<f64>, ModelError> {
    let v = x - eye;
    let n = v.norm();
    if !(n > 0.0) {
        return Err(ModelError::ZeroDirection);
    }
    Ok(v / n)
}

pub fn view_direction_backward(x: &Vector3<f64>, eye: &Vector3<f64>, d_out: &Vector3<f64>) -> Vector3<f64> {
    let v = x - eye;
    let n = v.norm();
    let u = v / n;
    (d_out - u * u.dot(d_out)) / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppearanceConfig {
    pub hidden: usize,
    pub frame_latent_dim: usize,
    pub direction_bands: usize,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            frame_latent_dim: 8,
            direction_bands: 2,
        }
    }
}

/// One learnable latent per training frame.
#[derive(Debug, Clone)]
pub struct FrameLatentTable {
    pub id: ParamId,
    pub frames: usize,
    pub dim: usize,
}

impl FrameLatentTable {
    pub fn new(store: &mut ParamStore, name: &str, frames: usize, dim: usize) -> Result<Self, NnError> {
        let id = store.add_zeros(format!("{name}/frame_latents"), &[frames, dim], ParamGroup::Latent)?;
        Ok(Self { id, frames, dim })
    }

    /// Arithmetic mean over all rows.
    pub fn mean(&self, store: &ParamStore) -> Vec<f64> {
        let v = store.value(self.id);
        let mut m = vec![0.0; self.dim];
        if self.frames == 0 {
            return m;
        }
        for row in v.chunks(self.dim) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= self.frames as f64);
        m
    }

    /// The frame's latent, or the mean latent for frames outside the table.
    pub fn latent(&self, store: &ParamStore, frame: Option<usize>) -> Vec<f64> {
        match frame {
            Some(f) if f < self.frames => store.value(self.id)[f * self.dim..(f + 1) * self.dim].to_vec(),
            _ => self.mean(store),
        }
    }

    pub fn accumulate_grad(&self, store: &mut ParamStore, frame: Option<usize>, d: &[f64]) {
        if let Some(f) = frame.filter(|f| *f < self.frames) {
            for (g, v) in store.grad_mut(self.id)[f * self.dim..(f + 1) * self.dim].iter_mut().zip(d) {
                *g += v;
            }
        }
    }
}

/// Per-Gaussian shading inputs.
pub struct ShadeInputs<'a> {
    /// `[gaussian][channel][basis]`, flattened.
    pub sh: &'a [f64],
    pub sh_degree: usize,
    /// Canonicalized unit view directions.
    pub directions: &'a [Vector3<f64>],
    pub motion_features: ArrayView2<'a, f64>,
    pub frame_latent: &'a [f64],
}

/// Gradients of [`ColorNet::forward`] w.r.t. its inputs.
pub struct ShadeGrad {
    pub sh: Vec<f64>,
    pub directions: Vec<Vector3<f64>>,
    pub motion_features: Array2<f64>,
    pub frame_latent: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ShadeCache {
    sh: Vec<f64>,
    sh_degree: usize,
    directions: Vec<Vector3<f64>>,
}

/// Single-hidden-layer MLP: `[SH·basis per channel ∥ γ(d̂) ∥ f_mt ∥ Z_r] → rgb`.
#[derive(Debug, Clone)]
pub struct ColorNet {
    bands: usize,
    feature_dim: usize,
    latent_dim: usize,
    mlp: Mlp,
    cache: Vec<ShadeCache>,
}

impl ColorNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        feature_dim: usize,
        cfg: &AppearanceConfig,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let input = 3 + encoded_dim(3, cfg.direction_bands) + feature_dim + cfg.frame_latent_dim;
        let mlp = Mlp::new(store, name, &[input, cfg.hidden, 3], Activation::Relu, Activation::Sigmoid, rng)?;
        Ok(Self {
            bands: cfg.direction_bands,
            feature_dim,
            latent_dim: cfg.frame_latent_dim,
            mlp,
            cache: Vec::new(),
        })
    }

    fn inputs(&self, x: &ShadeInputs) -> Result<Array2<f64>, ModelError> {
        let n = x.directions.len();
        let k = sh_basis_count(x.sh_degree);
        check_len("SH block", n * 3 * k, x.sh.len())?;
        check_len("motion feature rows", n, x.motion_features.nrows())?;
        check_len("motion feature width", self.feature_dim, x.motion_features.ncols())?;
        check_len("frame latent", self.latent_dim, x.frame_latent.len())?;
        let dir_w = encoded_dim(3, self.bands);
        let mut m = Array2::zeros((n, self.mlp.in_dim()));
        for (i, mut row) in m.rows_mut().into_iter().enumerate() {
            let r = row.as_slice_mut().expect("standard layout");
            let (basis, _) = sh_basis(&x.directions[i], x.sh_degree);
            for c in 0..3 {
                let coef = &x.sh[(i * 3 + c) * k..(i * 3 + c + 1) * k];
                r[c] = coef.iter().zip(&basis).map(|(a, b)| a * b).sum();
            }
            encode_into(x.directions[i].as_slice(), self.bands, &mut r[3..3 + dir_w]);
            let f0 = 3 + dir_w;
            for (dst, src) in r[f0..f0 + self.feature_dim].iter_mut().zip(x.motion_features.row(i)) {
                *dst = *src;
            }
            r[f0 + self.feature_dim..].copy_from_slice(x.frame_latent);
        }
        Ok(m)
    }

    pub fn shade(&self, store: &ParamStore, x: &ShadeInputs) -> Result<Array2<f64>, ModelError> {
        Ok(self.mlp.infer(store, self.inputs(x)?.view())?)
    }

    pub fn forward(&mut self, store: &ParamStore, x: &ShadeInputs) -> Result<Array2<f64>, ModelError> {
        let m = self.inputs(x)?;
        let out = self.mlp.forward(store, m.view())?;
        self.cache.push(ShadeCache {
            sh: x.sh.to_vec(),
            sh_degree: x.sh_degree,
            directions: x.directions.to_vec(),
        });
        Ok(out)
    }

    pub fn backward(&mut self, store: &mut ParamStore, d_rgb: &Array2<f64>) -> Result<ShadeGrad, ModelError> {
        let cache = self
            .cache
            .pop()
            .ok_or_else(|| NnError::NoForwardCache("color net".into()))?;
        let d_in = self.mlp.backward(store, d_rgb.view())?;
        let n = cache.directions.len();
        let k = sh_basis_count(cache.sh_degree);
        let dir_w = encoded_dim(3, self.bands);
        let f0 = 3 + dir_w;
        let mut g = ShadeGrad {
            sh: vec![0.0; cache.sh.len()],
            directions: Vec::with_capacity(n),
            motion_features: d_in.slice(s![.., f0..f0 + self.feature_dim]).to_owned(),
            frame_latent: d_in.slice(s![.., f0 + self.feature_dim..]).sum_axis(ndarray::Axis(0)).to_vec(),
        };
        for (i, row) in d_in.rows().into_iter().enumerate() {
            let r = row.as_slice().expect("standard layout");
            let d = cache.directions[i];
            let (basis, basis_grad) = sh_basis(&d, cache.sh_degree);
            let enc = encode_backward(d.as_slice(), self.bands, &r[3..3 + dir_w]);
            let mut dd = Vector3::new(enc[0], enc[1], enc[2]);
            for c in 0..3 {
                let base = (i * 3 + c) * k;
                for j in 0..k {
                    g.sh[base + j] = r[c] * basis[j];
                    let coef = cache.sh[base + j] * r[c];
                    dd += Vector3::from(basis_grad[j]) * coef;
                }
            }
            g.directions.push(dd);
        }
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
        self.mlp.clear_cache();
    }
}
