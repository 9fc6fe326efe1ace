//! Central-difference checks of every hand-written adjoint, one report per
//! operation, plus two end-to-end checks through the whole avatar model.

use nalgebra::{Matrix2, Matrix3, Matrix4, Vector2, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::{numeric_gradient, numeric_param_gradient, sample_coordinates, worst_relative_error, FD_STEP};
use crate::appearance::{canonicalize_view_dir, canonicalize_view_dir_backward, AppearanceConfig, ColorNet, ShadeInputs};
use crate::gaussian::quat::Quat;
use crate::gaussian::{build_covariance, build_covariance_backward, sh_basis_count};
use crate::human_transform::{
    rigid_transform, rigid_transform_backward, softmax_rows, softmax_rows_backward, SkinningConfig, SkinningNet,
};
use crate::latentbone::{EncoderConfig, EncoderVariant, LatentboneEncoder};
use crate::model::{Ablation, AvatarModel, FrameQuery, ModelConfig};
use crate::motion_trend::{apply_delta, apply_delta_backward, DeformationDelta, DeformedGaussians, MotionTrendConfig, MotionTrendNet};
use crate::nnkit::encoding::{encode, encode_backward};
use crate::nnkit::{Activation, DenseLayer, LstmCell, Mlp, ParamGroup, ParamId, ParamStore};
use crate::render::project::{project, project_backward, Splat2D};
use crate::render::raster::{rasterize, rasterize_backward, ShadedSplat};
use crate::render::{render, render_backward, Camera, SplatScene};
use crate::rig::{axis_angle_to_matrix, part_dims, sample_surface, Pose, PosePartition, Rig, SurfaceSample};
use crate::train::losses;
use crate::train::perceptual::{PerceptualLoss, MIN_SIZE};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const PIPELINE_TOLERANCE: f64 = 1e-3;
/// Parameter coordinates probed per network.
const PARAM_PROBES: usize = 48;
/// Parameter coordinates probed per end-to-end check.
const PIPELINE_PROBES: usize = 32;

type CheckResult = Result<OpReport, Box<dyn std::error::Error + Send + Sync>>;

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    /// Worst relative error over every checked coordinate.
    pub worst: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl OpReport {
    fn new(name: &'static str, tolerance: f64, analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len(), "{name}: gradient lengths differ");
        Self {
            name,
            worst: worst_relative_error(analytic, numeric),
            tolerance,
            checked: analytic.len(),
        }
    }

    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance && self.checked > 0
    }
}

/// Accumulates analytic/numeric pairs from several blocks of one operation.
struct Pairs {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

impl Pairs {
    fn new() -> Self {
        Self {
            analytic: Vec::new(),
            numeric: Vec::new(),
        }
    }

    fn push(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.analytic.extend_from_slice(analytic);
        self.numeric.extend_from_slice(numeric);
    }

    fn report(&self, name: &'static str, tolerance: f64) -> OpReport {
        OpReport::new(name, tolerance, &self.analytic, &self.numeric)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn dot<'a>(a: impl IntoIterator<Item = &'a f64>, b: &[f64]) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vec3s(v: &[f64]) -> Vec<Vector3<f64>> {
    v.chunks_exact(3).map(Vector3::from_column_slice).collect()
}

fn flat3(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|x| [x.x, x.y, x.z]).collect()
}

fn flat_mat3(v: &[Matrix3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|m| m.as_slice().to_vec()).collect()
}

fn mats3(v: &[f64]) -> Vec<Matrix3<f64>> {
    v.chunks_exact(9).map(Matrix3::from_column_slice).collect()
}

fn quats(v: &[f64]) -> Vec<Quat> {
    v.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect()
}

fn param_grads(store: &ParamStore, coords: &[(ParamId, usize)]) -> Vec<f64> {
    coords.iter().map(|&(id, i)| store.grad(id)[i]).collect()
}

/// Adds noise to every network and latent tensor so that zero-initialized
/// rows do not hide gradient paths.
fn jitter_networks(store: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| matches!(p.group, ParamGroup::Network | ParamGroup::Latent))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in store.value_mut(id) {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

fn random_bone(rng: &mut ChaCha8Rng) -> Matrix4<f64> {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let mut m = axis_angle_to_matrix(&axis).to_homogeneous();
    for r in 0..3 {
        m[(r, 3)] = rng.gen_range(-1.0..1.0);
    }
    m
}

fn dense(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut store = ParamStore::new();
    let mut layer = DenseLayer::new(&mut store, "dense", 5, 4, Activation::Tanh, rng)?;
    jitter_networks(&mut store, rng, 0.2);
    let x = Array2::from_shape_vec((3, 5), uniform(rng, 15, -1.0, 1.0))?;
    let w = uniform(rng, 12, -1.0, 1.0);
    layer.forward(&store, x.view())?;
    let dx = layer.backward(&mut store, Array2::from_shape_vec((3, 4), w.clone())?.view())?;
    let mut pairs = Pairs::new();
    let nx = numeric_gradient(x.as_slice().unwrap(), FD_STEP, |v| {
        let xv = Array2::from_shape_vec((3, 5), v.to_vec()).unwrap();
        dot(layer.infer(&store, xv.view()).unwrap().iter(), &w)
    });
    pairs.push(dx.as_slice().unwrap(), &nx);
    let coords = sample_coordinates(&store, usize::MAX, rng);
    let analytic = param_grads(&store, &coords);
    let np = numeric_param_gradient(&mut store, &coords, FD_STEP, |s| dot(layer.infer(s, x.view()).unwrap().iter(), &w));
    pairs.push(&analytic, &np);
    Ok(pairs.report("dense", OP_TOLERANCE))
}

fn mlp(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut store = ParamStore::new();
    let mut net = Mlp::new(&mut store, "mlp", &[4, 7, 6, 3], Activation::Relu, Activation::Sigmoid, rng)?;
    jitter_networks(&mut store, rng, 0.2);
    let x = uniform(rng, 4, -1.0, 1.0);
    let w = uniform(rng, 3, -1.0, 1.0);
    net.forward_vec(&store, &x)?;
    let dx = net.backward_vec(&mut store, &w)?;
    let mut pairs = Pairs::new();
    let nx = numeric_gradient(&x, FD_STEP, |v| dot(&net.infer_vec(&store, v).unwrap(), &w));
    pairs.push(&dx, &nx);
    let coords = sample_coordinates(&store, PARAM_PROBES, rng);
    let analytic = param_grads(&store, &coords);
    let np = numeric_param_gradient(&mut store, &coords, FD_STEP, |s| dot(&net.infer_vec(s, &x).unwrap(), &w));
    pairs.push(&analytic, &np);
    Ok(pairs.report("mlp", OP_TOLERANCE))
}

fn lstm(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut store = ParamStore::new();
    let mut cell = LstmCell::new(&mut store, "lstm", 4, 5, rng)?;
    jitter_networks(&mut store, rng, 0.2);
    let xs: Vec<Vec<f64>> = (0..3).map(|_| uniform(rng, 4, -1.0, 1.0)).collect();
    let w = uniform(rng, 5, -1.0, 1.0);
    cell.run_sequence(&store, &xs, true)?;
    let dxs = cell.backward_sequence(&mut store, &w)?;
    let mut pairs = Pairs::new();
    let flat: Vec<f64> = xs.concat();
    let nx = numeric_gradient(&flat, FD_STEP, |v| {
        let seq: Vec<Vec<f64>> = v.chunks(4).map(<[f64]>::to_vec).collect();
        dot(&cell.run_sequence(&store, &seq, false).unwrap(), &w)
    });
    pairs.push(&dxs.concat(), &nx);
    let coords = sample_coordinates(&store, PARAM_PROBES, rng);
    let analytic = param_grads(&store, &coords);
    let np = numeric_param_gradient(&mut store, &coords, FD_STEP, |s| dot(&cell.run_sequence(s, &xs, false).unwrap(), &w));
    pairs.push(&analytic, &np);
    Ok(pairs.report("lstm", OP_TOLERANCE))
}

fn positional_encoding(rng: &mut ChaCha8Rng) -> CheckResult {
    let x = uniform(rng, 3, -1.0, 1.0);
    let bands = 4;
    let w = uniform(rng, encode(&x, bands).len(), -1.0, 1.0);
    let analytic = encode_backward(&x, bands, &w);
    let numeric = numeric_gradient(&x, FD_STEP, |v| dot(&encode(v, bands), &w));
    Ok(OpReport::new("positional encoding", OP_TOLERANCE, &analytic, &numeric))
}

fn latentbone(rng: &mut ChaCha8Rng) -> CheckResult {
    let rig = Rig::smpl_like();
    let dims = part_dims(&rig);
    let cfg = EncoderConfig {
        latent_dim: 4,
        branch_width: 6,
        fusion_hidden: 8,
        feature_dim: 5,
    };
    let mut pairs = Pairs::new();
    for part_segmentation in [true, false] {
        let mut store = ParamStore::new();
        let variant = EncoderVariant {
            part_segmentation,
            clothes_latent: true,
        };
        let mut enc = LatentboneEncoder::new(&mut store, "encoder", dims, &cfg, variant, rng)?;
        jitter_networks(&mut store, rng, 0.2);
        let frames: Vec<PosePartition> = (0..3)
            .map(|_| PosePartition {
                left_arm: uniform(rng, dims[0], -1.0, 1.0),
                right_arm: uniform(rng, dims[1], -1.0, 1.0),
                legs: uniform(rng, dims[2], -1.0, 1.0),
                torso: uniform(rng, dims[3], -1.0, 1.0),
            })
            .collect();
        let w = uniform(rng, 3 * cfg.feature_dim, -1.0, 1.0);
        enc.forward(&store, &frames)?;
        enc.backward(&mut store, &Array2::from_shape_vec((3, cfg.feature_dim), w.clone())?)?;
        let mut coords = sample_coordinates(&store, PARAM_PROBES, rng);
        let clothes = enc.clothes_latent().expect("clothes latent enabled");
        coords.extend((0..cfg.latent_dim).map(|i| (clothes, i)));
        let analytic = param_grads(&store, &coords);
        let np = numeric_param_gradient(&mut store, &coords, FD_STEP, |s| dot(enc.encode(s, &frames).unwrap().iter(), &w));
        pairs.push(&analytic, &np);
    }
    Ok(pairs.report("latentbone encoder", OP_TOLERANCE))
}

fn delta_dot(d: &DeformationDelta, w: &DeformationDelta) -> f64 {
    let mut s = 0.0;
    for i in 0..d.len() {
        s += d.offsets[i].dot(&w.offsets[i]) + d.log_scales[i].dot(&w.log_scales[i]);
        s += d.rotations[i].iter().zip(&w.rotations[i]).map(|(a, b)| a * b).sum::<f64>();
    }
    s + dot(d.appearance.iter(), w.appearance.as_slice().unwrap())
}

fn random_delta(rng: &mut ChaCha8Rng, n: usize, appearance_dim: usize) -> DeformationDelta {
    let mut d = DeformationDelta::zeros(n, appearance_dim);
    d.offsets = vec3s(&uniform(rng, 3 * n, -1.0, 1.0));
    d.rotations = quats(&uniform(rng, 4 * n, -1.0, 1.0));
    d.log_scales = vec3s(&uniform(rng, 3 * n, -1.0, 1.0));
    d.appearance = Array2::from_shape_vec((n, appearance_dim), uniform(rng, n * appearance_dim, -1.0, 1.0)).unwrap();
    d
}

fn motion_trend(rng: &mut ChaCha8Rng) -> CheckResult {
    let cfg = MotionTrendConfig {
        window_len: 3,
        window_step: 1,
        lstm_hidden: 5,
        decoder_width: 8,
        position_bands: 2,
        appearance_dim: 3,
        max_offset: 0.1,
    };
    let (feature_dim, n) = (4, 3);
    let mut pairs = Pairs::new();
    for use_lstm in [true, false] {
        let mut store = ParamStore::new();
        let mut net = MotionTrendNet::new(&mut store, "motion", feature_dim, &cfg, use_lstm, rng)?;
        jitter_networks(&mut store, rng, 0.3);
        let seq: Vec<Vec<f64>> = (0..cfg.window_len).map(|_| uniform(rng, feature_dim, -1.0, 1.0)).collect();
        let pos = uniform(rng, 3 * n, -1.0, 1.0);
        let w = random_delta(rng, n, cfg.appearance_dim);
        net.forward(&store, &seq, &vec3s(&pos))?;
        let (d_seq, d_pos) = net.backward(&mut store, &w)?;
        let flat_seq = seq.concat();
        let ns = numeric_gradient(&flat_seq, FD_STEP, |v| {
            let s: Vec<Vec<f64>> = v.chunks(feature_dim).map(<[f64]>::to_vec).collect();
            delta_dot(&net.predict(&store, &s, &vec3s(&pos)).unwrap(), &w)
        });
        pairs.push(&d_seq.concat(), &ns);
        let np = numeric_gradient(&pos, FD_STEP, |v| delta_dot(&net.predict(&store, &seq, &vec3s(v)).unwrap(), &w));
        pairs.push(&flat3(&d_pos), &np);
        let coords = sample_coordinates(&store, PARAM_PROBES, rng);
        let analytic = param_grads(&store, &coords);
        let nparams = numeric_param_gradient(&mut store, &coords, FD_STEP, |s| {
            delta_dot(&net.predict(s, &seq, &vec3s(&pos)).unwrap(), &w)
        });
        pairs.push(&analytic, &nparams);
    }
    Ok(pairs.report("motion trend", OP_TOLERANCE))
}

fn deformation(rng: &mut ChaCha8Rng) -> CheckResult {
    let n = 3;
    // per Gaussian: position, rotation, log-scale, then the delta's offset, rotation, log-scale
    const W: usize = 20;
    let x = uniform(rng, n * W, -1.0, 1.0);
    let unpack = |v: &[f64]| {
        let mut pos = Vec::new();
        let mut rot = Vec::new();
        let mut ls = Vec::new();
        let mut d = DeformationDelta::zeros(n, 0);
        for (i, c) in v.chunks_exact(W).enumerate() {
            pos.push(Vector3::new(c[0], c[1], c[2]));
            rot.push([c[3], c[4], c[5], c[6]]);
            ls.push(Vector3::new(c[7], c[8], c[9]));
            d.offsets[i] = Vector3::new(c[10], c[11], c[12]);
            d.rotations[i] = [c[13], c[14], c[15], c[16]];
            d.log_scales[i] = Vector3::new(c[17], c[18], c[19]);
        }
        (pos, rot, ls, d)
    };
    let wp = vec3s(&uniform(rng, 3 * n, -1.0, 1.0));
    let wq = quats(&uniform(rng, 4 * n, -1.0, 1.0));
    let ws = vec3s(&uniform(rng, 3 * n, -1.0, 1.0));
    let objective = |out: &DeformedGaussians| -> f64 {
        (0..n)
            .map(|i| {
                out.positions[i].dot(&wp[i])
                    + out.log_scales[i].dot(&ws[i])
                    + out.rotations[i].iter().zip(&wq[i]).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    };
    let (_, rot, _, d) = unpack(&x);
    let grad = DeformedGaussians {
        positions: wp.clone(),
        rotations: wq.clone(),
        log_scales: ws.clone(),
    };
    let (dc, dd) = apply_delta_backward(&rot, &d, &grad);
    let mut analytic = Vec::with_capacity(x.len());
    for i in 0..n {
        analytic.extend(dc.positions[i].iter());
        analytic.extend(dc.rotations[i]);
        analytic.extend(dc.log_scales[i].iter());
        analytic.extend(dd.offsets[i].iter());
        analytic.extend(dd.rotations[i]);
        analytic.extend(dd.log_scales[i].iter());
    }
    let numeric = numeric_gradient(&x, FD_STEP, |v| {
        let (p, r, s, d) = unpack(v);
        objective(&apply_delta(&p, &r, &s, &d).unwrap())
    });
    Ok(OpReport::new("deformation apply", OP_TOLERANCE, &analytic, &numeric))
}

fn covariance(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut pairs = Pairs::new();
    for _ in 0..4 {
        let x = uniform(rng, 7, -1.0, 1.0);
        let w = Matrix3::from_column_slice(&uniform(rng, 9, -1.0, 1.0));
        let q = [x[0], x[1], x[2], x[3]];
        let (dq, ds) = build_covariance_backward(&q, &Vector3::new(x[4], x[5], x[6]), &w)?;
        let analytic: Vec<f64> = dq.iter().chain(ds.iter()).copied().collect();
        let numeric = numeric_gradient(&x, FD_STEP, |v| {
            let sigma = build_covariance(&[v[0], v[1], v[2], v[3]], &Vector3::new(v[4], v[5], v[6])).unwrap();
            sigma.component_mul(&w).sum()
        });
        pairs.push(&analytic, &numeric);
    }
    Ok(pairs.report("covariance build", OP_TOLERANCE))
}

fn skinning(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut store = ParamStore::new();
    let cfg = SkinningConfig {
        width: 8,
        position_bands: 2,
    };
    let bones = 5;
    let mut net = SkinningNet::new(&mut store, "skinning", bones, &cfg, rng)?;
    jitter_networks(&mut store, rng, 0.2);
    let n = 3;
    let pos = uniform(rng, 3 * n, -1.0, 1.0);
    let w = uniform(rng, n * bones, -1.0, 1.0);
    net.forward(&store, &vec3s(&pos))?;
    let d_pos = net.backward(&mut store, &Array2::from_shape_vec((n, bones), w.clone())?)?;
    let mut pairs = Pairs::new();
    let np = numeric_gradient(&pos, FD_STEP, |v| dot(net.weights(&store, &vec3s(v)).unwrap().iter(), &w));
    pairs.push(&flat3(&d_pos), &np);
    let coords = sample_coordinates(&store, PARAM_PROBES, rng);
    let analytic = param_grads(&store, &coords);
    let nparams = numeric_param_gradient(&mut store, &coords, FD_STEP, |s| {
        dot(net.weights(s, &vec3s(&pos)).unwrap().iter(), &w)
    });
    pairs.push(&analytic, &nparams);
    Ok(pairs.report("skinning field", OP_TOLERANCE))
}

fn rigid(rng: &mut ChaCha8Rng) -> CheckResult {
    let (n, b) = (3, 4);
    let bones: Vec<Matrix4<f64>> = (0..b).map(|_| random_bone(rng)).collect();
    // positions, free covariance entries, skinning logits
    let x = uniform(rng, 3 * n + 9 * n + n * b, -1.0, 1.0);
    let split = |v: &[f64]| {
        let pos = vec3s(&v[..3 * n]);
        let cov = mats3(&v[3 * n..12 * n]);
        let logits = Array2::from_shape_vec((n, b), v[12 * n..].to_vec()).unwrap();
        (pos, cov, logits)
    };
    let wp = vec3s(&uniform(rng, 3 * n, -1.0, 1.0));
    let wc = mats3(&uniform(rng, 9 * n, -1.0, 1.0));
    let wl = mats3(&uniform(rng, 9 * n, -1.0, 1.0));
    let objective = |v: &[f64]| {
        let (pos, cov, logits) = split(v);
        let out = rigid_transform(&pos, &cov, &softmax_rows(&logits), &bones).unwrap();
        (0..n)
            .map(|i| {
                out.positions[i].dot(&wp[i]) + out.covariances[i].component_mul(&wc[i]).sum() + out.linear[i].component_mul(&wl[i]).sum()
            })
            .sum::<f64>()
    };
    let (pos, cov, logits) = split(&x);
    let weights = softmax_rows(&logits);
    let observed = rigid_transform(&pos, &cov, &weights, &bones)?;
    let g = rigid_transform_backward(&pos, &cov, &observed, &bones, &wp, &wc, &wl);
    let d_logits = softmax_rows_backward(&weights, &g.weights);
    let mut analytic = flat3(&g.positions);
    analytic.extend(flat_mat3(&g.covariances));
    analytic.extend(d_logits.iter());
    let numeric = numeric_gradient(&x, FD_STEP, objective);
    Ok(OpReport::new("rigid transform", OP_TOLERANCE, &analytic, &numeric))
}

fn view_direction(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut pairs = Pairs::new();
    for _ in 0..4 {
        let a = axis_angle_to_matrix(&Vector3::from_column_slice(&uniform(rng, 3, -1.5, 1.5))) * rng.gen_range(0.5..1.5)
            + Matrix3::from_column_slice(&uniform(rng, 9, -0.2, 0.2));
        let d = Vector3::from_column_slice(&uniform(rng, 3, -2.0, 2.0));
        let w = Vector3::from_column_slice(&uniform(rng, 3, -1.0, 1.0));
        let (gd, ga) = canonicalize_view_dir_backward(&d, &a, &w);
        let mut x = d.as_slice().to_vec();
        x.extend_from_slice(a.as_slice());
        let numeric = numeric_gradient(&x, FD_STEP, |v| {
            canonicalize_view_dir(&Vector3::from_column_slice(&v[..3]), &Matrix3::from_column_slice(&v[3..]))
                .unwrap()
                .dot(&w)
        });
        let analytic: Vec<f64> = gd.iter().chain(ga.iter()).copied().collect();
        pairs.push(&analytic, &numeric);
    }
    Ok(pairs.report("view-direction canonicalization", OP_TOLERANCE))
}

fn shading(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut store = ParamStore::new();
    let cfg = AppearanceConfig {
        hidden: 12,
        frame_latent_dim: 3,
        direction_bands: 2,
    };
    let (n, feature_dim, degree) = (3, 4, 1);
    let k = sh_basis_count(degree);
    let mut net = ColorNet::new(&mut store, "color", feature_dim, &cfg, rng)?;
    jitter_networks(&mut store, rng, 0.2);
    let sizes = [n * 3 * k, 3 * n, n * feature_dim, cfg.frame_latent_dim];
    let x = uniform(rng, sizes.iter().sum(), -1.0, 1.0);
    let w = uniform(rng, 3 * n, -1.0, 1.0);
    let eval = |net: &ColorNet, s: &ParamStore, v: &[f64]| {
        let (sh, rest) = v.split_at(sizes[0]);
        let (dirs, rest) = rest.split_at(sizes[1]);
        let (feat, latent) = rest.split_at(sizes[2]);
        let dirs = vec3s(dirs);
        let feat = Array2::from_shape_vec((n, feature_dim), feat.to_vec()).unwrap();
        let inputs = ShadeInputs {
            sh,
            sh_degree: degree,
            directions: &dirs,
            motion_features: feat.view(),
            frame_latent: latent,
        };
        dot(net.shade(s, &inputs).unwrap().iter(), &w)
    };
    {
        let (sh, rest) = x.split_at(sizes[0]);
        let (dirs, rest) = rest.split_at(sizes[1]);
        let (feat, latent) = rest.split_at(sizes[2]);
        let dirs = vec3s(dirs);
        let feat = Array2::from_shape_vec((n, feature_dim), feat.to_vec())?;
        net.forward(
            &store,
            &ShadeInputs {
                sh,
                sh_degree: degree,
                directions: &dirs,
                motion_features: feat.view(),
                frame_latent: latent,
            },
        )?;
    }
    let g = net.backward(&mut store, &Array2::from_shape_vec((n, 3), w.clone())?)?;
    let mut analytic = g.sh.clone();
    analytic.extend(flat3(&g.directions));
    analytic.extend(g.motion_features.iter());
    analytic.extend(&g.frame_latent);
    let mut pairs = Pairs::new();
    let numeric = numeric_gradient(&x, FD_STEP, |v| eval(&net, &store, v));
    pairs.push(&analytic, &numeric);
    let coords = sample_coordinates(&store, PARAM_PROBES, rng);
    let analytic = param_grads(&store, &coords);
    let np = numeric_param_gradient(&mut store, &coords, FD_STEP, |s| eval(&net, s, &x));
    pairs.push(&analytic, &np);
    Ok(pairs.report("shading", OP_TOLERANCE))
}

fn test_camera(size: usize, focal: f64) -> Camera {
    Camera::look_at(Vector3::new(0.4, 1.2, 3.0), Vector3::new(0.0, 0.9, 0.0), Vector3::y(), focal, size, size)
}

fn projection(rng: &mut ChaCha8Rng) -> CheckResult {
    let cam = test_camera(64, 300.0);
    let mut pairs = Pairs::new();
    for _ in 0..8 {
        let mean = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(0.6..1.2), rng.gen_range(-0.3..0.3));
        let f = Matrix3::from_column_slice(&uniform(rng, 9, -0.1, 0.1));
        let cov = f * f.transpose();
        let wm = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let wc = Matrix2::from_column_slice(&uniform(rng, 4, -1.0, 1.0));
        let (dm, dc) = project_backward(&mean, &cov, &cam, &wm, &wc);
        let mut x = mean.as_slice().to_vec();
        x.extend_from_slice(cov.as_slice());
        let numeric = numeric_gradient(&x, FD_STEP, |v| {
            let s: Splat2D = project(&Vector3::from_column_slice(&v[..3]), &Matrix3::from_column_slice(&v[3..]), &cam)
                .expect("splat stays in view");
            s.mean.dot(&wm) + s.cov.component_mul(&wc).sum()
        });
        let analytic: Vec<f64> = dm.iter().chain(dc.iter()).copied().collect();
        pairs.push(&analytic, &numeric);
    }
    Ok(pairs.report("projection", OP_TOLERANCE))
}

fn rasterizer(rng: &mut ChaCha8Rng) -> CheckResult {
    let n = 6;
    const W: usize = 9;
    let mut x = Vec::new();
    for _ in 0..n {
        x.extend([
            rng.gen_range(1.0..7.0),
            rng.gen_range(1.0..7.0),
            rng.gen_range(6.0..12.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(6.0..12.0),
            rng.gen_range(0.2..0.8),
            rng.gen(),
            rng.gen(),
            rng.gen(),
        ]);
    }
    let splats = |v: &[f64]| -> Vec<ShadedSplat> {
        v.chunks_exact(W)
            .enumerate()
            .map(|(i, p)| ShadedSplat {
                splat: Splat2D {
                    mean: Vector2::new(p[0], p[1]),
                    cov: Matrix2::new(p[2], p[3], p[3], p[4]),
                    depth: 1.0 + i as f64,
                    radius: 100.0,
                },
                opacity: p[5],
                color: [p[6], p[7], p[8]],
            })
            .collect()
    };
    let bg = [0.1, 0.2, 0.3];
    let wc = uniform(rng, 192, -1.0, 1.0);
    let wa = uniform(rng, 64, -1.0, 1.0);
    let (_, state) = rasterize(&splats(&x), bg, 8, 8)?;
    let g = rasterize_backward(&state, &wc, &wa)?;
    let mut analytic = Vec::new();
    for i in 0..n {
        let c = g.covs[i];
        analytic.extend([g.means[i].x, g.means[i].y, c[(0, 0)], c[(0, 1)] + c[(1, 0)], c[(1, 1)], g.opacities[i]]);
        analytic.extend(g.colors[i]);
    }
    let numeric = numeric_gradient(&x, FD_STEP, |v| {
        let (o, _) = rasterize(&splats(v), bg, 8, 8).unwrap();
        dot(&o.color, &wc) + dot(&o.alpha, &wa)
    });
    Ok(OpReport::new("rasterizer", OP_TOLERANCE, &analytic, &numeric))
}

fn splatting(rng: &mut ChaCha8Rng) -> CheckResult {
    let cam = Camera::look_at(Vector3::new(0.2, 0.1, 3.0), Vector3::zeros(), Vector3::y(), 12.0, 8, 8);
    let n = 4;
    // per Gaussian: mean, covariance factor, opacity, rgb
    const W: usize = 16;
    let mut x = Vec::new();
    for _ in 0..n {
        x.extend(uniform(rng, 3, -0.3, 0.3));
        for k in 0..9 {
            x.push(if k % 4 == 0 { rng.gen_range(0.5..0.8) } else { rng.gen_range(-0.1..0.1) });
        }
        x.extend([rng.gen_range(0.2..0.8), rng.gen(), rng.gen(), rng.gen()]);
    }
    let unpack = |v: &[f64]| {
        let mut means = Vec::new();
        let mut covs = Vec::new();
        let mut op = Vec::new();
        let mut col = Vec::new();
        for q in v.chunks_exact(W) {
            means.push(Vector3::new(q[0], q[1], q[2]));
            let a = Matrix3::from_row_slice(&q[3..12]);
            covs.push(a * a.transpose());
            op.push(q[12]);
            col.push([q[13], q[14], q[15]]);
        }
        (means, covs, op, col)
    };
    let bg = [0.0, 0.5, 1.0];
    let wc = uniform(rng, 192, -1.0, 1.0);
    let wa = uniform(rng, 64, -1.0, 1.0);
    let (m, c, o, col) = unpack(&x);
    let scene = SplatScene {
        means: &m,
        covariances: &c,
        opacities: &o,
        colors: &col,
    };
    let (_, state) = render(&scene, &cam, bg)?;
    let g = render_backward(&state, &scene, &cam, &wc, &wa)?;
    let mut analytic = Vec::new();
    for i in 0..n {
        analytic.extend(g.means[i].iter());
        let a = Matrix3::from_row_slice(&x[i * W + 3..i * W + 12]);
        let da = (g.covariances[i] + g.covariances[i].transpose()) * a;
        for r in 0..3 {
            for k in 0..3 {
                analytic.push(da[(r, k)]);
            }
        }
        analytic.push(g.opacities[i]);
        analytic.extend(g.colors[i]);
    }
    let numeric = numeric_gradient(&x, FD_STEP, |v| {
        let (m, c, o, col) = unpack(v);
        let scene = SplatScene {
            means: &m,
            covariances: &c,
            opacities: &o,
            colors: &col,
        };
        let (out, _) = render(&scene, &cam, bg).unwrap();
        dot(&out.color, &wc) + dot(&out.alpha, &wa)
    });
    Ok(OpReport::new("world-space splatting", OP_TOLERANCE, &analytic, &numeric))
}

fn l1_loss(rng: &mut ChaCha8Rng) -> CheckResult {
    let pixels = 20;
    let pred = uniform(rng, 3 * pixels, 0.0, 1.0);
    let gt = uniform(rng, 3 * pixels, 0.0, 1.0);
    let mask: Vec<f64> = (0..pixels).map(|_| if rng.gen_bool(0.6) { 1.0 } else { 0.0 }).collect();
    let mut pairs = Pairs::new();
    for m in [Some(&mask[..]), None] {
        let (_, analytic) = losses::l1(&pred, &gt, m)?;
        let numeric = numeric_gradient(&pred, FD_STEP, |v| losses::l1(v, &gt, m).unwrap().0);
        pairs.push(&analytic, &numeric);
    }
    Ok(pairs.report("l1 loss", OP_TOLERANCE))
}

fn mask_loss(rng: &mut ChaCha8Rng) -> CheckResult {
    let alpha = uniform(rng, 30, 0.01, 0.99);
    let mask: Vec<f64> = (0..30).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let (_, analytic) = losses::mask_loss(&alpha, &mask)?;
    let numeric = numeric_gradient(&alpha, FD_STEP, |v| losses::mask_loss(v, &mask).unwrap().0);
    Ok(OpReport::new("mask loss", OP_TOLERANCE, &analytic, &numeric))
}

fn perceptual_loss(rng: &mut ChaCha8Rng) -> CheckResult {
    let size = MIN_SIZE;
    let loss = PerceptualLoss::default();
    let pred = uniform(rng, 3 * size * size, 0.0, 1.0);
    let gt = uniform(rng, 3 * size * size, 0.0, 1.0);
    let (_, grad) = loss.loss_grad(&pred, &gt, size, size)?;
    let picks = rand::seq::index::sample(rng, pred.len(), PARAM_PROBES).into_vec();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in picks {
        analytic.push(grad[i]);
        numeric.push(super::fd::central_difference(&pred, i, FD_STEP, |v| loss.loss(v, &gt, size, size).unwrap()));
    }
    Ok(OpReport::new("perceptual loss", OP_TOLERANCE, &analytic, &numeric))
}

fn skin_loss(rng: &mut ChaCha8Rng) -> CheckResult {
    let (n, b) = (5, 4);
    let samples: Vec<SurfaceSample> = (0..n)
        .map(|i| SurfaceSample {
            position: Vector3::zeros(),
            normal: Vector3::y(),
            bone: i % b,
            weights: uniform(rng, b, 0.0, 1.0),
        })
        .collect();
    let pred = uniform(rng, n * b, 0.0, 1.0);
    let (_, grad) = losses::skin_loss(&Array2::from_shape_vec((n, b), pred.clone())?, &samples)?;
    let numeric = numeric_gradient(&pred, FD_STEP, |v| {
        losses::skin_loss(&Array2::from_shape_vec((n, b), v.to_vec()).unwrap(), &samples).unwrap().0
    });
    Ok(OpReport::new("skinning loss", OP_TOLERANCE, grad.as_slice().unwrap(), &numeric))
}

/// Settings of one end-to-end check.
#[derive(Debug, Clone, Copy)]
pub struct PipelineCase {
    pub gaussians: usize,
    pub size: usize,
    pub window_len: usize,
    pub perceptual: bool,
}

/// 4 Gaussians, 8×8 pixels, a two-frame window, L1 + mask + skinning.
pub const MICRO_PIPELINE: PipelineCase = PipelineCase {
    gaussians: 4,
    size: 8,
    window_len: 2,
    perceptual: false,
};

/// The full objective including the perceptual term, which needs 32×32.
pub const FULL_LOSS_PIPELINE: PipelineCase = PipelineCase {
    gaussians: 24,
    size: MIN_SIZE,
    window_len: 2,
    perceptual: true,
};

fn tiny_model_config(case: &PipelineCase) -> ModelConfig {
    ModelConfig {
        gaussians: case.gaussians,
        sh_degree: 1,
        background: [0.1, 0.2, 0.3],
        encoder: EncoderConfig {
            latent_dim: 4,
            branch_width: 6,
            fusion_hidden: 8,
            feature_dim: 6,
        },
        motion: MotionTrendConfig {
            window_len: case.window_len,
            window_step: 1,
            lstm_hidden: 6,
            decoder_width: 8,
            position_bands: 2,
            appearance_dim: 4,
            max_offset: 0.1,
        },
        skinning: SkinningConfig {
            width: 8,
            position_bands: 2,
        },
        appearance: AppearanceConfig {
            hidden: 8,
            frame_latent_dim: 3,
            direction_bands: 2,
        },
    }
}

/// Gradient of `L1 + mask + perceptual + skinning` w.r.t. randomly chosen
/// model parameters, through every stage of the avatar.
pub fn pipeline(case: PipelineCase, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = Rig::smpl_like();
    let bones = rig.bone_count();
    let frames = 3;
    let mut model = AvatarModel::new(rig.clone(), tiny_model_config(&case), Ablation::default(), frames, seed)?;
    jitter_networks(&mut model.store, &mut rng, 0.1);
    let track: Vec<Pose> = (0..frames)
        .map(|f| Pose {
            rotations: (0..bones).map(|_| Vector3::from_column_slice(&uniform(&mut rng, 3, -0.3, 0.3))).collect(),
            root_translation: Vector3::zeros(),
            frame: f,
        })
        .collect();
    let query = FrameQuery {
        track: &track,
        index: frames - 1,
        latent: Some(1),
    };
    let focal = case.size as f64 * 3.0 / 2.2;
    let cam = Camera::look_at(Vector3::new(0.3, 1.0, 3.0), Vector3::new(0.0, 0.9, 0.0), Vector3::y(), focal, case.size, case.size);
    let pixels = case.size * case.size;
    let gt = uniform(&mut rng, 3 * pixels, 0.0, 1.0);
    // an all-foreground mask keeps |alpha − mask| away from its kink
    let mask = vec![1.0; pixels];
    let samples = sample_surface(&rig, 8, seed);
    let weights = losses::LossWeights {
        mask: 0.5,
        perceptual: if case.perceptual { 0.2 } else { 0.0 },
        skin: 0.3,
    };
    let perceptual = PerceptualLoss::default();
    let objective = |model: &mut AvatarModel| -> f64 {
        let out = model.render(&query, &cam).unwrap();
        let mut total = losses::l1(&out.color, &gt, Some(&mask)).unwrap().0
            + weights.mask * losses::mask_loss(&out.alpha, &mask).unwrap().0
            + weights.skin * model.skin_loss(&samples).unwrap();
        if case.perceptual {
            total += weights.perceptual * perceptual.loss(&out.color, &gt, case.size, case.size).unwrap();
        }
        total
    };
    model.store.zero_grad();
    let out = model.forward(&query, &cam)?;
    let (_, d_l1) = losses::l1(&out.color, &gt, Some(&mask))?;
    let (_, d_mask) = losses::mask_loss(&out.alpha, &mask)?;
    let d_percep = if case.perceptual {
        perceptual.loss_grad(&out.color, &gt, case.size, case.size)?.1
    } else {
        vec![0.0; d_l1.len()]
    };
    model.skin_loss_backward(&samples, weights.skin)?;
    let d_color: Vec<f64> = d_l1.iter().zip(&d_percep).map(|(a, b)| a + weights.perceptual * b).collect();
    let d_alpha: Vec<f64> = d_mask.iter().map(|g| weights.mask * g).collect();
    model.backward(&d_color, &d_alpha)?;
    let coords = sample_coordinates(&model.store, PIPELINE_PROBES, &mut rng);
    let analytic = param_grads(&model.store, &coords);
    let numeric: Vec<f64> = coords
        .iter()
        .map(|&(id, i)| {
            let orig = model.store.flat_get(id, i);
            model.store.flat_set(id, i, orig + FD_STEP);
            let fp = objective(&mut model);
            model.store.flat_set(id, i, orig - FD_STEP);
            let fm = objective(&mut model);
            model.store.flat_set(id, i, orig);
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect();
    let name = if case.perceptual { "full pipeline (32x32, full loss)" } else { "full pipeline (8x8 micro scene)" };
    Ok(OpReport::new(name, PIPELINE_TOLERANCE, &analytic, &numeric))
}

/// Every per-operation check followed by the two end-to-end checks.
pub fn run_suite(seed: u64) -> Result<Vec<OpReport>, Box<dyn std::error::Error + Send + Sync>> {
    let checks: [fn(&mut ChaCha8Rng) -> CheckResult; 18] = [
        dense,
        mlp,
        lstm,
        positional_encoding,
        latentbone,
        motion_trend,
        deformation,
        covariance,
        skinning,
        rigid,
        view_direction,
        shading,
        projection,
        rasterizer,
        splatting,
        l1_loss,
        mask_loss,
        perceptual_loss,
    ];
    let mut reports = Vec::new();
    for (k, check) in checks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        reports.push(check(&mut rng)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
    reports.push(skin_loss(&mut rng)?);
    reports.push(pipeline(MICRO_PIPELINE, seed)?);
    reports.push(pipeline(FULL_LOSS_PIPELINE, seed)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let reports = run_suite(0).unwrap();
        assert!(reports.len() >= 12);
        for r in &reports {
            println!("{:<36} {:.2e} ({} coords)", r.name, r.worst, r.checked);
            assert!(r.passed(), "{} worst {:.3e} over {}", r.name, r.worst, r.checked);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let r = OpReport::new("broken", OP_TOLERANCE, &[1.0, 2.0], &[1.0, 2.1]);
        assert!(!r.passed());
    }
}
