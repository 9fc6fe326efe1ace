//! Per-frame pose feature from the four body-part pose vectors and a
//! learnable clothes latent code.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nnkit::{Activation, DenseLayer, Mlp, NnError, ParamGroup, ParamId, ParamStore};
use crate::rig::{partition_pose, Pose, PosePartition, Rig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub branch_width: usize,
    pub fusion_hidden: usize,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            branch_width: 32,
            fusion_hidden: 128,
            feature_dim: 64,
        }
    }
}

/// Which inputs the encoder sees. Both flags on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderVariant {
    pub part_segmentation: bool,
    pub clothes_latent: bool,
}

impl Default for EncoderVariant {
    fn default() -> Self {
        Self {
            part_segmentation: true,
            clothes_latent: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatentboneEncoder {
    part_dims: [usize; 4],
    latent_dim: usize,
    clothes: Option<ParamId>,
    branches: Vec<DenseLayer>,
    fusion: Mlp,
    variant: EncoderVariant,
}

fn encoder_params(part_dims: &[usize; 4], cfg: &EncoderConfig, single_width: Option<usize>) -> usize {
    let (branch, fused_in) = match single_width {
        None => {
            let b: usize = part_dims.iter().map(|d| (d + cfg.latent_dim + 1) * cfg.branch_width).sum();
            (b, 4 * cfg.branch_width)
        }
        Some(w) => ((part_dims.iter().sum::<usize>() + cfg.latent_dim + 1) * w, w),
    };
    branch + (fused_in + 1) * cfg.fusion_hidden + (cfg.fusion_hidden + 1) * cfg.feature_dim
}

/// Width of the single whole-body branch whose total parameter count is
/// closest to the four-branch encoder's.
pub fn matched_single_branch_width(part_dims: &[usize; 4], cfg: &EncoderConfig) -> usize {
    let target = encoder_params(part_dims, cfg, None) as i64;
    (1..=16 * cfg.branch_width.max(1) + 64)
        .min_by_key(|&w| (encoder_params(part_dims, cfg, Some(w)) as i64 - target).abs())
        .unwrap_or(1)
}

impl LatentboneEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        part_dims: [usize; 4],
        cfg: &EncoderConfig,
        variant: EncoderVariant,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let clothes = if variant.clothes_latent {
            Some(store.add_uniform(format!("{name}/clothes_latent"), &[cfg.latent_dim], ParamGroup::Latent, 0.1, rng)?)
        } else {
            None
        };
        let (branches, fused_in) = if variant.part_segmentation {
            let b = part_dims
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    DenseLayer::new(
                        store,
                        &format!("{name}/branch{i}"),
                        d + cfg.latent_dim,
                        cfg.branch_width,
                        Activation::Tanh,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            (b, 4 * cfg.branch_width)
        } else {
            let w = matched_single_branch_width(&part_dims, cfg);
            let total: usize = part_dims.iter().sum();
            let b = DenseLayer::new(store, &format!("{name}/branch"), total + cfg.latent_dim, w, Activation::Tanh, rng)?;
            (vec![b], w)
        };
        let fusion = Mlp::new(
            store,
            &format!("{name}/fusion"),
            &[fused_in, cfg.fusion_hidden, cfg.feature_dim],
            Activation::Tanh,
            Activation::Identity,
            rng,
        )?;
        Ok(Self {
            part_dims,
            latent_dim: cfg.latent_dim,
            clothes,
            branches,
            fusion,
            variant,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.fusion.out_dim()
    }

    pub fn variant(&self) -> EncoderVariant {
        self.variant
    }

    pub fn clothes_latent(&self) -> Option<ParamId> {
        self.clothes
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(DenseLayer::param_count).sum::<usize>()
            + self.fusion.param_count()
            + self.clothes.map_or(0, |_| self.latent_dim)
    }

    fn latent(&self, store: &ParamStore) -> Vec<f64> {
        match self.clothes {
            Some(id) => store.value(id).to_vec(),
            None => vec![0.0; self.latent_dim],
        }
    }

    fn check(&self, parts: &PosePartition) -> Result<(), NnError> {
        for (k, (got, want)) in parts.dims().iter().zip(&self.part_dims).enumerate() {
            if got != want {
                return Err(NnError::Shape {
                    what: format!("pose part {k}"),
                    expected: *want,
                    got: *got,
                });
            }
        }
        Ok(())
    }

    /// Branch input matrices, one row per frame.
    fn branch_inputs(&self, store: &ParamStore, frames: &[PosePartition]) -> Result<Vec<Array2<f64>>, NnError> {
        for p in frames {
            self.check(p)?;
        }
        let z = self.latent(store);
        let build = |rows: Vec<Vec<f64>>| {
            let width = rows[0].len();
            Array2::from_shape_vec((rows.len(), width), rows.concat()).expect("rectangular rows")
        };
        if self.variant.part_segmentation {
            Ok((0..4)
                .map(|k| build(frames.iter().map(|p| [p.parts()[k], &z[..]].concat()).collect()))
                .collect())
        } else {
            Ok(vec![build(frames.iter().map(|p| [&p.concat()[..], &z[..]].concat()).collect())])
        }
    }

    fn fused_input(outs: &[Array2<f64>]) -> Array2<f64> {
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        ndarray::concatenate(ndarray::Axis(1), &views).expect("same row count")
    }

    /// Per-branch activations before fusion (one row per frame).
    pub fn branch_outputs(&self, store: &ParamStore, frames: &[PosePartition]) -> Result<Vec<Array2<f64>>, NnError> {
        self.branch_inputs(store, frames)?
            .iter()
            .zip(&self.branches)
            .map(|(x, b)| b.infer(store, x.view()))
            .collect()
    }

    /// Features for a batch of frames without recording intermediates.
    pub fn encode(&self, store: &ParamStore, frames: &[PosePartition]) -> Result<Array2<f64>, NnError> {
        let outs = self.branch_outputs(store, frames)?;
        self.fusion.infer(store, Self::fused_input(&outs).view())
    }

    pub fn encode_frame(&self, store: &ParamStore, parts: &PosePartition) -> Result<Vec<f64>, NnError> {
        Ok(self.encode(store, std::slice::from_ref(parts))?.row(0).to_vec())
    }

    pub fn encode_track(&self, store: &ParamStore, rig: &Rig, poses: &[Pose]) -> Result<Vec<Vec<f64>>, NnError> {
        let parts: Vec<_> = poses.iter().map(|p| partition_pose(rig, p)).collect();
        Ok(self.encode(store, &parts)?.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// Recording forward over a batch of frames.
    pub fn forward(&mut self, store: &ParamStore, frames: &[PosePartition]) -> Result<Array2<f64>, NnError> {
        let inputs = self.branch_inputs(store, frames)?;
        let outs = inputs
            .iter()
            .zip(self.branches.iter_mut())
            .map(|(x, b)| b.forward(store, x.view()))
            .collect::<Result<Vec<_>, _>>()?;
        self.fusion.forward(store, Self::fused_input(&outs).view())
    }

    /// Reverses the latest [`LatentboneEncoder::forward`], accumulating
    /// gradients into the network and the clothes latent.
    pub fn backward(&mut self, store: &mut ParamStore, d_features: &Array2<f64>) -> Result<(), NnError> {
        let d_fused = self.fusion.backward(store, d_features.view())?;
        let mut d_latent = vec![0.0; self.latent_dim];
        let mut col = 0;
        for branch in &mut self.branches {
            let w = branch.out_dim;
            let d_in = branch.backward(store, d_fused.slice(s![.., col..col + w]))?;
            col += w;
            let lat_start = branch.in_dim - self.latent_dim;
            for row in d_in.rows() {
                for (acc, v) in d_latent.iter_mut().zip(row.iter().skip(lat_start)) {
                    *acc += v;
                }
            }
        }
        if let Some(id) = self.clothes {
            for (g, d) in store.grad_mut(id).iter_mut().zip(&d_latent) {
                *g += d;
            }
        }
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.branches.iter_mut().for_each(DenseLayer::clear_cache);
        self.fusion.clear_cache();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::part_dims;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(variant: EncoderVariant) -> (ParamStore, LatentboneEncoder, Rig) {
        let rig = Rig::smpl_like();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = LatentboneEncoder::new(&mut store, "enc", part_dims(&rig), &EncoderConfig::default(), variant, &mut rng)
            .unwrap();
        (store, enc, rig)
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose {
            rotations: (0..24)
                .map(|_| Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
                .collect(),
            root_translation: Vector3::zeros(),
            frame: 0,
        }
    }

    #[test]
    fn shape_and_determinism() {
        let (store, enc, rig) = setup(EncoderVariant::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parts = partition_pose(&rig, &random_pose(&mut rng));
        let a = enc.encode_frame(&store, &parts).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, enc.encode_frame(&store, &parts).unwrap());
    }

    #[test]
    fn zeroed_branch_ignores_its_part() {
        let (mut store, enc, rig) = setup(EncoderVariant::default());
        let w = store.id("enc/branch1/weight").unwrap();
        store.value_mut(w).iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pose = random_pose(&mut rng);
        let a = enc.encode_frame(&store, &partition_pose(&rig, &pose)).unwrap();
        for b in rig.part_bones(crate::rig::BodyPart::RightArm) {
            pose.rotations[b] = Vector3::new(1.0, -0.3, 0.7);
        }
        let b = enc.encode_frame(&store, &partition_pose(&rig, &pose)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn branch_locality() {
        let (store, enc, rig) = setup(EncoderVariant::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pose = random_pose(&mut rng);
        let before = enc.branch_outputs(&store, &[partition_pose(&rig, &pose)]).unwrap();
        pose.rotations[16] += Vector3::new(0.2, 0.0, 0.1);
        let after = enc.branch_outputs(&store, &[partition_pose(&rig, &pose)]).unwrap();
        assert_ne!(before[0], after[0]);
        for k in 1..4 {
            assert_eq!(before[k], after[k]);
        }
    }

    #[test]
    fn track_matches_single_calls() {
        let (store, enc, rig) = setup(EncoderVariant::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poses: Vec<_> = (0..6).map(|_| random_pose(&mut rng)).collect();
        let track = enc.encode_track(&store, &rig, &poses).unwrap();
        for (p, f) in poses.iter().zip(&track) {
            assert_eq!(&enc.encode_frame(&store, &partition_pose(&rig, p)).unwrap(), f);
        }
        let mut reversed = poses.clone();
        reversed.reverse();
        let mut rt = enc.encode_track(&store, &rig, &reversed).unwrap();
        rt.reverse();
        assert_eq!(rt, track);
    }

    #[test]
    fn part_dim_mismatch_errors() {
        let (store, enc, _) = setup(EncoderVariant::default());
        let bad = PosePartition {
            left_arm: vec![0.0; 3],
            right_arm: vec![0.0; 15],
            legs: vec![0.0; 27],
            torso: vec![0.0; 18],
        };
        assert!(matches!(enc.encode_frame(&store, &bad), Err(NnError::Shape { .. })));
    }

    #[test]
    fn ablation_variants() {
        let (full_store, full, _) = setup(EncoderVariant::default());
        let (single_store, single, _) = setup(EncoderVariant {
            part_segmentation: false,
            clothes_latent: true,
        });
        let ratio = single.param_count() as f64 / full.param_count() as f64;
        assert!((ratio - 1.0).abs() < 0.01, "{ratio}");
        assert_eq!(full_store.numel(), full.param_count());
        assert_eq!(single_store.numel(), single.param_count());
        let (store, no_latent, _) = setup(EncoderVariant {
            part_segmentation: true,
            clothes_latent: false,
        });
        assert!(no_latent.clothes_latent().is_none());
        assert!(store.id("enc/clothes_latent").is_none());
    }
}
