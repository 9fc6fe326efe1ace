//! Temporal deformation: an LSTM over a window of pose features, decoded per
//! Gaussian into position/rotation/scale offsets and an appearance feature.

use nalgebra::Vector3;
use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, ModelError};
use crate::gaussian::quat::{self, Quat};
use crate::nnkit::encoding::{encode_backward, encode_into, encoded_dim};
use crate::nnkit::{Activation, LstmCell, Mlp, ParamStore};

/// Decoder outputs per Gaussian besides the appearance feature:
/// offset (3), rotation (4), log-scale (3).
pub const DELTA_WIDTH: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionTrendConfig {
    pub window_len: usize,
    pub window_step: usize,
    pub lstm_hidden: usize,
    pub decoder_width: usize,
    pub position_bands: usize,
    pub appearance_dim: usize,
    pub max_offset: f64,
}

impl Default for MotionTrendConfig {
    fn default() -> Self {
        Self {
            window_len: 4,
            window_step: 2,
            lstm_hidden: 64,
            decoder_width: 64,
            position_bands: 4,
            appearance_dim: 16,
            max_offset: 0.1,
        }
    }
}

/// Frames `p − (len−1)·step, …, p − step, p`, clamped from below at `first`.
pub fn window_indices(p: usize, len: usize, step: usize, first: usize) -> Vec<usize> {
    (0..len)
        .rev()
        .map(|k| p.checked_sub(k * step).map_or(first, |v| v.max(first)))
        .collect()
}

pub fn build_feature_sequence(
    track: &[Vec<f64>],
    p: usize,
    len: usize,
    step: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    if track.is_empty() {
        return Err(ModelError::EmptyTrack);
    }
    if p >= track.len() {
        return Err(ModelError::Size {
            what: "window end frame".into(),
            expected: track.len() - 1,
            got: p,
        });
    }
    Ok(window_indices(p, len.max(1), step.max(1), 0)
        .into_iter()
        .map(|i| track[i].clone())
        .collect())
}

/// Per-Gaussian offsets. Also used as the container for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationDelta {
    pub offsets: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<Vector3<f64>>,
    /// One row per Gaussian.
    pub appearance: Array2<f64>,
}

impl DeformationDelta {
    pub fn identity(n: usize, appearance_dim: usize) -> Self {
        Self {
            offsets: vec![Vector3::zeros(); n],
            rotations: vec![quat::IDENTITY; n],
            log_scales: vec![Vector3::zeros(); n],
            appearance: Array2::zeros((n, appearance_dim)),
        }
    }

    /// All-zero gradient buffer.
    pub fn zeros(n: usize, appearance_dim: usize) -> Self {
        Self {
            rotations: vec![[0.0; 4]; n],
            ..Self::identity(n, appearance_dim)
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

#[derive(Debug, Clone)]
enum Temporal {
    Lstm(LstmCell),
    /// Current-frame-only replacement with a matched parameter count.
    Feedforward(Mlp),
}

#[derive(Debug, Clone)]
struct DecodeCache {
    seq_len: usize,
    positions: Vec<Vector3<f64>>,
    raw: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct MotionTrendNet {
    cfg: MotionTrendConfig,
    feature_dim: usize,
    temporal: Temporal,
    decoder: Mlp,
    cache: Vec<DecodeCache>,
}

/// Hidden width of the feed-forward stand-in whose parameter count is
/// closest to an LSTM with the given sizes.
pub fn matched_feedforward_width(feature_dim: usize, hidden: usize) -> usize {
    let lstm = (4 * hidden * (feature_dim + hidden + 1)) as i64;
    let mlp = |w: usize| ((feature_dim + 1) * w + (w + 1) * hidden) as i64;
    (1..=64 * hidden.max(1)).min_by_key(|&w| (mlp(w) - lstm).abs()).unwrap_or(1)
}

impl MotionTrendNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        feature_dim: usize,
        cfg: &MotionTrendConfig,
        use_lstm: bool,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let hidden = cfg.lstm_hidden;
        let temporal = if use_lstm {
            Temporal::Lstm(LstmCell::new(store, &format!("{name}/lstm"), feature_dim, hidden, rng)?)
        } else {
            let w = matched_feedforward_width(feature_dim, hidden);
            Temporal::Feedforward(Mlp::new(
                store,
                &format!("{name}/frame_mlp"),
                &[feature_dim, w, hidden],
                Activation::Tanh,
                Activation::Tanh,
                rng,
            )?)
        };
        let out = DELTA_WIDTH + cfg.appearance_dim;
        let decoder = Mlp::new(
            store,
            &format!("{name}/decoder"),
            &[
                hidden + encoded_dim(3, cfg.position_bands),
                cfg.decoder_width,
                cfg.decoder_width,
                out,
            ],
            Activation::Relu,
            Activation::Identity,
            rng,
        )?;
        // deformation rows start at zero so training begins undeformed
        let last = decoder.last();
        let in_dim = last.in_dim;
        store.value_mut(last.weight)[..DELTA_WIDTH * in_dim].iter_mut().for_each(|v| *v = 0.0);
        store.value_mut(last.bias)[..DELTA_WIDTH].iter_mut().for_each(|v| *v = 0.0);
        Ok(Self {
            cfg: cfg.clone(),
            feature_dim,
            temporal,
            decoder,
            cache: Vec::new(),
        })
    }

    pub fn config(&self) -> &MotionTrendConfig {
        &self.cfg
    }

    pub fn uses_lstm(&self) -> bool {
        matches!(self.temporal, Temporal::Lstm(_))
    }

    pub fn temporal_param_count(&self) -> usize {
        match &self.temporal {
            Temporal::Lstm(l) => l.param_count(),
            Temporal::Feedforward(m) => m.param_count(),
        }
    }

    fn summarize(&mut self, store: &ParamStore, seq: &[Vec<f64>], record: bool) -> Result<Vec<f64>, ModelError> {
        if seq.is_empty() {
            return Err(ModelError::EmptyTrack);
        }
        for f in seq {
            check_len("pose feature", self.feature_dim, f.len())?;
        }
        Ok(match &mut self.temporal {
            Temporal::Lstm(cell) => cell.run_sequence(store, seq, record)?,
            Temporal::Feedforward(mlp) => {
                let last = seq.last().unwrap();
                if record {
                    mlp.forward_vec(store, last)?
                } else {
                    mlp.infer_vec(store, last)?
                }
            }
        })
    }

    fn decoder_input(&self, h: &[f64], positions: &[Vector3<f64>]) -> Array2<f64> {
        let hd = h.len();
        let width = hd + encoded_dim(3, self.cfg.position_bands);
        let mut x = Array2::zeros((positions.len(), width));
        for (mut row, p) in x.rows_mut().into_iter().zip(positions) {
            let r = row.as_slice_mut().expect("standard layout");
            r[..hd].copy_from_slice(h);
            encode_into(p.as_slice(), self.cfg.position_bands, &mut r[hd..]);
        }
        x
    }

    fn finish(&self, raw: &Array2<f64>) -> Result<DeformationDelta, ModelError> {
        let n = raw.nrows();
        let m = self.cfg.max_offset;
        let mut d = DeformationDelta::identity(n, self.cfg.appearance_dim);
        for (i, row) in raw.rows().into_iter().enumerate() {
            d.offsets[i] = Vector3::new(m * row[0].tanh(), m * row[1].tanh(), m * row[2].tanh());
            d.rotations[i] = quat::normalize(&[1.0 + row[3], row[4], row[5], row[6]])?;
            d.log_scales[i] = Vector3::new(row[7], row[8], row[9]);
        }
        d.appearance.assign(&raw.slice(s![.., DELTA_WIDTH..]));
        if d.appearance.iter().any(|v| !v.is_finite()) || d.offsets.iter().any(|o| !o.iter().all(|v| v.is_finite())) {
            return Err(ModelError::NonFinite("deformation decoder output".into()));
        }
        Ok(d)
    }

    /// Deltas for every Gaussian without recording intermediates.
    pub fn predict(
        &mut self,
        store: &ParamStore,
        seq: &[Vec<f64>],
        positions: &[Vector3<f64>],
    ) -> Result<DeformationDelta, ModelError> {
        let h = self.summarize(store, seq, false)?;
        let raw = self.decoder.infer(store, self.decoder_input(&h, positions).view())?;
        self.finish(&raw)
    }

    /// Recording variant of [`MotionTrendNet::predict`].
    pub fn forward(
        &mut self,
        store: &ParamStore,
        seq: &[Vec<f64>],
        positions: &[Vector3<f64>],
    ) -> Result<DeformationDelta, ModelError> {
        let h = self.summarize(store, seq, true)?;
        let raw = self.decoder.forward(store, self.decoder_input(&h, positions).view())?;
        let out = self.finish(&raw);
        self.cache.push(DecodeCache {
            seq_len: seq.len(),
            positions: positions.to_vec(),
            raw,
        });
        out
    }

    /// Returns gradients w.r.t. the feature sequence and the canonical positions.
    pub fn backward(
        &mut self,
        store: &mut ParamStore,
        grad: &DeformationDelta,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vector3<f64>>), ModelError> {
        let cache = self
            .cache
            .pop()
            .ok_or_else(|| crate::nnkit::NnError::NoForwardCache("motion trend".into()))?;
        let n = cache.raw.nrows();
        check_len("delta gradient", n, grad.len())?;
        let m = self.cfg.max_offset;
        let mut d_raw = Array2::zeros(cache.raw.dim());
        for (i, (row, mut d)) in cache.raw.rows().into_iter().zip(d_raw.rows_mut()).enumerate() {
            for k in 0..3 {
                let t = row[k].tanh();
                d[k] = grad.offsets[i][k] * m * (1.0 - t * t);
            }
            let dq = quat::normalize_backward(&[1.0 + row[3], row[4], row[5], row[6]], &grad.rotations[i]);
            for k in 0..4 {
                d[3 + k] = dq[k];
            }
            for k in 0..3 {
                d[7 + k] = grad.log_scales[i][k];
            }
        }
        d_raw.slice_mut(s![.., DELTA_WIDTH..]).assign(&grad.appearance);
        let d_in = self.decoder.backward(store, d_raw.view())?;
        let hd = self.cfg.lstm_hidden;
        let d_h: Vec<f64> = d_in.slice(s![.., ..hd]).sum_axis(ndarray::Axis(0)).to_vec();
        let d_pos = cache
            .positions
            .iter()
            .zip(d_in.rows())
            .map(|(p, row)| {
                let g = encode_backward(p.as_slice(), self.cfg.position_bands, &row.as_slice().unwrap()[hd..]);
                Vector3::new(g[0], g[1], g[2])
            })
            .collect();
        let d_seq = match &mut self.temporal {
            Temporal::Lstm(cell) => cell.backward_sequence(store, &d_h)?,
            Temporal::Feedforward(mlp) => {
                let mut d = vec![vec![0.0; self.feature_dim]; cache.seq_len];
                d[cache.seq_len - 1] = mlp.backward_vec(store, &d_h)?;
                d
            }
        };
        Ok((d_seq, d_pos))
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
        self.decoder.clear_cache();
        match &mut self.temporal {
            Temporal::Lstm(c) => c.clear_cache(),
            Temporal::Feedforward(m) => m.clear_cache(),
        }
    }
}

/// Canonical Gaussians after their per-Gaussian offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformedGaussians {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<Vector3<f64>>,
}

/// `x + Δx`, `Δq ⊗ q`, `ln s + Δs`.
pub fn apply_delta(
    positions: &[Vector3<f64>],
    rotations: &[Quat],
    log_scales: &[Vector3<f64>],
    delta: &DeformationDelta,
) -> Result<DeformedGaussians, ModelError> {
    let n = positions.len();
    check_len("delta count", n, delta.len())?;
    check_len("rotation count", n, rotations.len())?;
    check_len("scale count", n, log_scales.len())?;
    let finite = delta.offsets.iter().all(|v| v.iter().all(|x| x.is_finite()))
        && delta.rotations.iter().all(|q| q.iter().all(|x| x.is_finite()))
        && delta.log_scales.iter().all(|v| v.iter().all(|x| x.is_finite()));
    if !finite {
        return Err(ModelError::NonFinite("deformation delta".into()));
    }
    Ok(DeformedGaussians {
        positions: positions.iter().zip(&delta.offsets).map(|(x, d)| x + d).collect(),
        rotations: rotations.iter().zip(&delta.rotations).map(|(q, d)| quat::mul(d, q)).collect(),
        log_scales: log_scales.iter().zip(&delta.log_scales).map(|(s, d)| s + d).collect(),
    })
}

/// Gradients of [`apply_delta`] w.r.t. the canonical attributes and the delta.
/// The canonical gradients come back in a [`DeformedGaussians`] layout; the
/// delta's appearance block is left zero.
pub fn apply_delta_backward(
    rotations: &[Quat],
    delta: &DeformationDelta,
    grad: &DeformedGaussians,
) -> (DeformedGaussians, DeformationDelta) {
    let n = rotations.len();
    let mut d_canon = DeformedGaussians {
        positions: grad.positions.clone(),
        rotations: vec![[0.0; 4]; n],
        log_scales: grad.log_scales.clone(),
    };
    let mut d_delta = DeformationDelta::zeros(n, delta.appearance.ncols());
    d_delta.offsets.clone_from(&grad.positions);
    d_delta.log_scales.clone_from(&grad.log_scales);
    for i in 0..n {
        let (dd, dq) = quat::mul_backward(&delta.rotations[i], &rotations[i], &grad.rotations[i]);
        d_delta.rotations[i] = dd;
        d_canon.rotations[i] = dq;
    }
    (d_canon, d_delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{AdamConfig, LearningRates};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(use_lstm: bool) -> (ParamStore, MotionTrendNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = MotionTrendNet::new(&mut store, "mt", 8, &MotionTrendConfig::default(), use_lstm, &mut rng).unwrap();
        (store, n)
    }

    fn positions(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(0.0..1.8), rng.gen_range(-0.3..0.3)))
            .collect()
    }

    #[test]
    fn window_examples() {
        assert_eq!(window_indices(7, 1, 5, 0), vec![7]);
        assert_eq!(window_indices(10, 3, 2, 0), vec![6, 8, 10]);
        assert_eq!(window_indices(1, 3, 2, 0), vec![0, 0, 1]);
        assert_eq!(window_indices(243, 4, 2, 240), vec![240, 240, 241, 243]);
        let track: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64]).collect();
        let seq = build_feature_sequence(&track, 10, 3, 2).unwrap();
        assert_eq!(seq, vec![vec![6.0], vec![8.0], vec![10.0]]);
        assert!(matches!(build_feature_sequence(&[], 0, 3, 2), Err(ModelError::EmptyTrack)));
    }

    #[test]
    fn fresh_net_predicts_identity_deltas() {
        let (store, mut mt) = net(true);
        let seq = vec![vec![0.3; 8], vec![-0.1; 8]];
        let d = mt.predict(&store, &seq, &positions(20, 1)).unwrap();
        assert!(d.offsets.iter().all(|v| *v == Vector3::zeros()));
        assert!(d.log_scales.iter().all(|v| *v == Vector3::zeros()));
        assert!(d.rotations.iter().all(|q| *q == quat::IDENTITY));
        assert!(d.appearance.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn identical_positions_identical_deltas() {
        let (store, mut mt) = net(true);
        let p = positions(1, 2)[0];
        let d = mt.predict(&store, &[vec![0.2; 8]], &[p, p]).unwrap();
        assert_eq!(d.appearance.row(0), d.appearance.row(1));
        assert_eq!(d.offsets[0], d.offsets[1]);
    }

    #[test]
    fn history_changes_deltas_after_training_step() {
        let (mut store, mut mt) = net(true);
        let pos = positions(4, 3);
        let a = vec![vec![0.9; 8], vec![0.1; 8]];
        let b = vec![vec![-0.9; 8], vec![0.1; 8]];
        let d = mt.forward(&store, &a, &pos).unwrap();
        let mut g = DeformationDelta::zeros(4, 16);
        g.offsets.iter_mut().for_each(|v| *v = Vector3::repeat(1.0));
        g.appearance.fill(0.5);
        mt.backward(&mut store, &g).unwrap();
        store.adam_step(&LearningRates::uniform(1e-2), &AdamConfig::default()).unwrap();
        let da = mt.predict(&store, &a, &pos).unwrap();
        let db = mt.predict(&store, &b, &pos).unwrap();
        assert_ne!(d.offsets, da.offsets);
        assert!((da.offsets[0] - db.offsets[0]).norm() > 0.0);
        assert_ne!(da.appearance, db.appearance);
    }

    #[test]
    fn feedforward_ignores_history() {
        let (store, mut mt) = net(false);
        assert!(!mt.uses_lstm());
        let pos = positions(3, 4);
        let a = mt.predict(&store, &[vec![0.9; 8], vec![0.1; 8]], &pos).unwrap();
        let b = mt.predict(&store, &[vec![-0.4; 8], vec![0.1; 8]], &pos).unwrap();
        assert_eq!(a, b);
        let (_, lstm) = net(true);
        let ratio = mt.temporal_param_count() as f64 / lstm.temporal_param_count() as f64;
        assert!((ratio - 1.0).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn apply_delta_laws() {
        let pos = positions(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rots: Vec<Quat> = (0..5)
            .map(|_| quat::normalize(&[rng.gen(), rng.gen::<f64>() - 0.5, rng.gen(), rng.gen::<f64>() - 0.5]).unwrap())
            .collect();
        let scales: Vec<_> = (0..5).map(|_| Vector3::new(rng.gen(), -rng.gen::<f64>(), 0.1)).collect();
        let zero = DeformationDelta::identity(5, 16);
        let same = apply_delta(&pos, &rots, &scales, &zero).unwrap();
        assert_eq!(same.positions, pos);
        assert_eq!(same.rotations, rots);
        assert_eq!(same.log_scales, scales);

        let mut d = DeformationDelta::identity(5, 16);
        d.log_scales[0] = Vector3::new(2f64.ln(), 0.0, 0.0);
        for q in &mut d.rotations {
            *q = quat::normalize(&[rng.gen(), rng.gen(), rng.gen::<f64>() - 0.5, rng.gen()]).unwrap();
        }
        let out = apply_delta(&pos, &rots, &scales, &d).unwrap();
        assert!((out.log_scales[0].x.exp() - 2.0 * scales[0].x.exp()).abs() < 1e-12);
        for i in 0..5 {
            let want = quat::to_rotmat(&d.rotations[i]).unwrap() * quat::to_rotmat(&rots[i]).unwrap();
            assert!((quat::to_rotmat(&out.rotations[i]).unwrap() - want).abs().max() < 1e-10);
        }
        d.offsets[2].y = f64::NAN;
        assert!(matches!(apply_delta(&pos, &rots, &scales, &d), Err(ModelError::NonFinite(_))));
    }
}
