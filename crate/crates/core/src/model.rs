//! The full avatar: canonical Gaussians plus every network, with a
//! recording forward pass from a pose window to an image and its adjoint.

use nalgebra::{Matrix3, Matrix4, Vector3};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{
    canonicalize_view_dir, canonicalize_view_dir_backward, AppearanceConfig, ColorNet, FrameLatentTable, ShadeInputs,
};
use crate::error::{check_len, ModelError};
use crate::gaussian::quat::{self, Quat};
use crate::gaussian::{build_covariance, build_covariance_backward, init_from_rig, sh_basis_count, GaussianCloud};
use crate::human_transform::{rigid_transform, rigid_transform_backward, ObservedGaussians, SkinningConfig, SkinningNet};
use crate::latentbone::{EncoderConfig, EncoderVariant, LatentboneEncoder};
use crate::motion_trend::{
    apply_delta, apply_delta_backward, window_indices, DeformationDelta, DeformedGaussians, MotionTrendConfig,
    MotionTrendNet,
};
use crate::nnkit::{sigmoid, Checkpoint, NnError, ParamGroup, ParamId, ParamStore};
use crate::render::{render, render_backward, Camera, RenderOutput, RenderState, SplatScene};
use crate::rig::{forward_kinematics, part_dims, partition_pose, Pose, Rig, SurfaceSample};

/// Components removed for ablation runs. All off is the full model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_lstm: bool,
    pub no_clothes_latent: bool,
    pub no_part_segmentation: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 3] = ["no_lstm", "no_clothes_latent", "no_part_segmentation"];

    pub fn set(&mut self, name: &str) -> Result<(), String> {
        match name {
            "no_lstm" => self.no_lstm = true,
            "no_clothes_latent" => self.no_clothes_latent = true,
            "no_part_segmentation" => self.no_part_segmentation = true,
            _ => return Err(format!("unknown ablation {name:?}; expected one of {:?}", Self::NAMES)),
        }
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let on = [self.no_lstm, self.no_clothes_latent, self.no_part_segmentation];
        Self::NAMES.iter().zip(on).filter(|(_, b)| *b).map(|(n, _)| *n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub gaussians: usize,
    pub sh_degree: usize,
    pub background: [f64; 3],
    pub encoder: EncoderConfig,
    pub motion: MotionTrendConfig,
    pub skinning: SkinningConfig,
    pub appearance: AppearanceConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gaussians: 8000,
            sh_degree: 1,
            background: [0.0; 3],
            encoder: EncoderConfig::default(),
            motion: MotionTrendConfig::default(),
            skinning: SkinningConfig::default(),
            appearance: AppearanceConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.gaussians == 0 {
            return Err("model.gaussians must be positive".into());
        }
        if self.sh_degree > 3 {
            return Err("model.sh_degree must be at most 3".into());
        }
        if self.motion.window_len == 0 || self.motion.window_step == 0 {
            return Err("model.motion window_len and window_step must be positive".into());
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err("model.background must lie in [0,1]".into());
        }
        Ok(())
    }
}

/// Tensor names of the canonical cloud inside the parameter store.
pub mod names {
    pub const POSITIONS: &str = "gaussians/positions";
    pub const LOG_SCALES: &str = "gaussians/log_scales";
    pub const ROTATIONS: &str = "gaussians/rotations";
    pub const OPACITY: &str = "gaussians/opacity_logits";
    pub const SH: &str = "gaussians/sh";
}

#[derive(Debug, Clone, Copy)]
struct CloudIds {
    positions: ParamId,
    log_scales: ParamId,
    rotations: ParamId,
    opacity: ParamId,
    sh: ParamId,
}

/// A frame to render: the pose track it belongs to, its index in that
/// track, and the row of the per-frame latent table (`None` uses the mean).
#[derive(Debug, Clone, Copy)]
pub struct FrameQuery<'a> {
    pub track: &'a [Pose],
    pub index: usize,
    pub latent: Option<usize>,
}

#[derive(Debug)]
struct StepCache {
    cam: Camera,
    latent: Option<usize>,
    delta: DeformationDelta,
    deformed: DeformedGaussians,
    cov_e: Vec<Matrix3<f64>>,
    bones: Vec<Matrix4<f64>>,
    observed: ObservedGaussians,
    views: Vec<Vector3<f64>>,
    opacities: Vec<f64>,
    colors: Vec<[f64; 3]>,
    state: RenderState,
}

#[derive(Debug)]
pub struct AvatarModel {
    pub rig: Rig,
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub store: ParamStore,
    ids: CloudIds,
    count: usize,
    encoder: LatentboneEncoder,
    motion: MotionTrendNet,
    skinning: SkinningNet,
    color: ColorNet,
    latents: FrameLatentTable,
    cache: Option<StepCache>,
}

fn vec3s(v: &[f64]) -> Vec<Vector3<f64>> {
    v.chunks_exact(3).map(Vector3::from_column_slice).collect()
}

fn quats(v: &[f64]) -> Vec<Quat> {
    v.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect()
}

fn add_vec3s(dst: &mut [f64], src: &[Vector3<f64>]) {
    for (d, s) in dst.chunks_exact_mut(3).zip(src) {
        d[0] += s.x;
        d[1] += s.y;
        d[2] += s.z;
    }
}

impl AvatarModel {
    /// Fresh model with a cloud sampled on the rig surface. `frames` sizes
    /// the per-frame latent table.
    pub fn new(rig: Rig, config: ModelConfig, ablation: Ablation, frames: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let cloud = init_from_rig(&rig, config.gaussians, seed, config.sh_degree);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7477_6f72_6b73);
        let mut store = ParamStore::new();
        let n = cloud.len();
        let flat3 = |v: &[Vector3<f64>]| v.iter().flat_map(|x| [x.x, x.y, x.z]).collect::<Vec<_>>();
        let ids = CloudIds {
            positions: store.add(names::POSITIONS, &[n, 3], ParamGroup::GaussianPosition, flat3(&cloud.positions))?,
            log_scales: store.add(names::LOG_SCALES, &[n, 3], ParamGroup::GaussianAttribute, flat3(&cloud.log_scales))?,
            rotations: store.add(
                names::ROTATIONS,
                &[n, 4],
                ParamGroup::GaussianAttribute,
                cloud.rotations.iter().flatten().copied().collect(),
            )?,
            opacity: store.add(names::OPACITY, &[n], ParamGroup::GaussianAttribute, cloud.opacity_logits.clone())?,
            sh: store.add(
                names::SH,
                &[n, 3, sh_basis_count(config.sh_degree)],
                ParamGroup::GaussianAttribute,
                cloud.sh.clone(),
            )?,
        };
        let variant = EncoderVariant {
            part_segmentation: !ablation.no_part_segmentation,
            clothes_latent: !ablation.no_clothes_latent,
        };
        let encoder = LatentboneEncoder::new(&mut store, "encoder", part_dims(&rig), &config.encoder, variant, &mut rng)?;
        let feature_dim = encoder.feature_dim();
        let motion = MotionTrendNet::new(&mut store, "motion", feature_dim, &config.motion, !ablation.no_lstm, &mut rng)?;
        let skinning = SkinningNet::new(&mut store, "skinning", rig.bone_count(), &config.skinning, &mut rng)?;
        let color = ColorNet::new(&mut store, "color", config.motion.appearance_dim, &config.appearance, &mut rng)?;
        let latents = FrameLatentTable::new(&mut store, "appearance", frames, config.appearance.frame_latent_dim)?;
        Ok(Self {
            rig,
            config,
            ablation,
            store,
            ids,
            count: n,
            encoder,
            motion,
            skinning,
            color,
            latents,
            cache: None,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn latent_frames(&self) -> usize {
        self.latents.frames
    }

    pub fn skinning(&self) -> &SkinningNet {
        &self.skinning
    }

    /// Snapshot of the canonical cloud.
    pub fn canonical(&self) -> GaussianCloud {
        GaussianCloud {
            positions: vec3s(self.store.value(self.ids.positions)),
            log_scales: vec3s(self.store.value(self.ids.log_scales)),
            rotations: quats(self.store.value(self.ids.rotations)),
            opacity_logits: self.store.value(self.ids.opacity).to_vec(),
            sh: self.store.value(self.ids.sh).to_vec(),
            sh_degree: self.config.sh_degree,
        }
    }

    /// Track indices feeding the window that ends at `index`.
    pub fn window(&self, index: usize) -> Vec<usize> {
        window_indices(index, self.config.motion.window_len, self.config.motion.window_step, 0)
    }

    /// Quaternions back to unit length after an optimizer step.
    pub fn renormalize(&mut self) -> Result<(), ModelError> {
        for q in self.store.value_mut(self.ids.rotations).chunks_exact_mut(4) {
            let u = quat::normalize(&[q[0], q[1], q[2], q[3]])?;
            q.copy_from_slice(&u);
        }
        Ok(())
    }

    /// Inference render; nothing is recorded.
    pub fn render(&mut self, q: &FrameQuery, cam: &Camera) -> Result<RenderOutput, ModelError> {
        Ok(self.evaluate(q, cam, false)?.0)
    }

    /// Recording forward pass; the next [`AvatarModel::backward`] consumes it.
    pub fn forward(&mut self, q: &FrameQuery, cam: &Camera) -> Result<RenderOutput, ModelError> {
        self.clear_cache();
        let (out, cache) = self.evaluate(q, cam, true)?;
        self.cache = cache;
        Ok(out)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        self.encoder.clear_cache();
        self.motion.clear_cache();
        self.skinning.clear_cache();
        self.color.clear_cache();
    }

    fn evaluate(
        &mut self,
        q: &FrameQuery,
        cam: &Camera,
        record: bool,
    ) -> Result<(RenderOutput, Option<StepCache>), ModelError> {
        if q.index >= q.track.len() {
            return Err(ModelError::Size {
                what: "frame index within track".into(),
                expected: q.track.len(),
                got: q.index,
            });
        }
        let n = self.count;
        let parts: Vec<_> = self
            .window(q.index)
            .into_iter()
            .map(|i| partition_pose(&self.rig, &q.track[i]))
            .collect();
        let features = if record {
            self.encoder.forward(&self.store, &parts)?
        } else {
            self.encoder.encode(&self.store, &parts)?
        };
        let seq: Vec<Vec<f64>> = features.rows().into_iter().map(|r| r.to_vec()).collect();
        let positions = vec3s(self.store.value(self.ids.positions));
        let rotations = quats(self.store.value(self.ids.rotations));
        let log_scales = vec3s(self.store.value(self.ids.log_scales));
        let delta = if record {
            self.motion.forward(&self.store, &seq, &positions)?
        } else {
            self.motion.predict(&self.store, &seq, &positions)?
        };
        let deformed = apply_delta(&positions, &rotations, &log_scales, &delta)?;
        let cov_e = deformed
            .rotations
            .iter()
            .zip(&deformed.log_scales)
            .map(|(r, s)| build_covariance(r, s))
            .collect::<Result<Vec<_>, _>>()?;
        let weights = if record {
            self.skinning.forward(&self.store, &deformed.positions)?
        } else {
            self.skinning.weights(&self.store, &deformed.positions)?
        };
        let bones = forward_kinematics(&self.rig, &q.track[q.index])?;
        let observed = rigid_transform(&deformed.positions, &cov_e, &weights, &bones)?;
        let eye = cam.center();
        let views: Vec<Vector3<f64>> = observed.positions.iter().map(|x| x - eye).collect();
        let dirs = views
            .iter()
            .zip(&observed.linear)
            .map(|(v, a)| canonicalize_view_dir(v, a))
            .collect::<Result<Vec<_>, _>>()?;
        let z_r = self.latents.latent(&self.store, q.latent);
        let sh = self.store.value(self.ids.sh).to_vec();
        let inputs = ShadeInputs {
            sh: &sh,
            sh_degree: self.config.sh_degree,
            directions: &dirs,
            motion_features: delta.appearance.view(),
            frame_latent: &z_r,
        };
        let rgb = if record {
            self.color.forward(&self.store, &inputs)?
        } else {
            self.color.shade(&self.store, &inputs)?
        };
        let colors: Vec<[f64; 3]> = rgb.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        let opacities: Vec<f64> = self.store.value(self.ids.opacity).iter().map(|&l| sigmoid(l)).collect();
        check_len("gaussian count", n, colors.len())?;
        let scene = SplatScene {
            means: &observed.positions,
            covariances: &observed.covariances,
            opacities: &opacities,
            colors: &colors,
        };
        let (out, state) = render(&scene, cam, self.config.background)?;
        let cache = record.then(|| StepCache {
            cam: cam.clone(),
            latent: q.latent,
            delta,
            deformed,
            cov_e,
            bones,
            observed,
            views,
            opacities,
            colors,
            state,
        });
        Ok((out, cache))
    }

    /// Accumulates parameter gradients of a pixel loss whose gradients on
    /// the last forward's color and alpha images are given.
    pub fn backward(&mut self, d_color: &[f64], d_alpha: &[f64]) -> Result<(), ModelError> {
        let c = self.cache.take().ok_or_else(|| NnError::NoForwardCache("avatar model".into()))?;
        let n = self.count;
        let scene = SplatScene {
            means: &c.observed.positions,
            covariances: &c.observed.covariances,
            opacities: &c.opacities,
            colors: &c.colors,
        };
        let sg = render_backward(&c.state, &scene, &c.cam, d_color, d_alpha)?;
        let mut d_rgb = Array2::zeros((n, 3));
        for (mut row, g) in d_rgb.rows_mut().into_iter().zip(&sg.colors) {
            row[0] = g[0];
            row[1] = g[1];
            row[2] = g[2];
        }
        let shade = self.color.backward(&mut self.store, &d_rgb)?;
        for (g, v) in self.store.grad_mut(self.ids.sh).iter_mut().zip(&shade.sh) {
            *g += v;
        }
        self.latents.accumulate_grad(&mut self.store, c.latent, &shade.frame_latent);
        for ((g, d), a) in self.store.grad_mut(self.ids.opacity).iter_mut().zip(&sg.opacities).zip(&c.opacities) {
            *g += d * a * (1.0 - a);
        }
        let mut d_obs = sg.means;
        let mut d_linear = Vec::with_capacity(n);
        for i in 0..n {
            let (dv, da) = canonicalize_view_dir_backward(&c.views[i], &c.observed.linear[i], &shade.directions[i]);
            d_obs[i] += dv;
            d_linear.push(da);
        }
        let rigid = rigid_transform_backward(
            &c.deformed.positions,
            &c.cov_e,
            &c.observed,
            &c.bones,
            &d_obs,
            &sg.covariances,
            &d_linear,
        );
        let d_skin = self.skinning.backward(&mut self.store, &rigid.weights)?;
        let mut d_def = DeformedGaussians {
            positions: rigid.positions.iter().zip(&d_skin).map(|(a, b)| a + b).collect(),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (dq, ds) = build_covariance_backward(&c.deformed.rotations[i], &c.deformed.log_scales[i], &rigid.covariances[i])?;
            d_def.rotations.push(dq);
            d_def.log_scales.push(ds);
        }
        let rotations = quats(self.store.value(self.ids.rotations));
        let (d_canon, mut d_delta) = apply_delta_backward(&rotations, &c.delta, &d_def);
        d_delta.appearance = shade.motion_features;
        let (d_seq, d_pos) = self.motion.backward(&mut self.store, &d_delta)?;
        let rows = d_seq.len();
        let width = d_seq.first().map_or(0, Vec::len);
        let d_features = Array2::from_shape_vec((rows, width), d_seq.into_iter().flatten().collect())
            .expect("rectangular feature gradient");
        self.encoder.backward(&mut self.store, &d_features)?;
        let pos = self.store.grad_mut(self.ids.positions);
        add_vec3s(pos, &d_canon.positions);
        add_vec3s(pos, &d_pos);
        add_vec3s(self.store.grad_mut(self.ids.log_scales), &d_canon.log_scales);
        for (g, d) in self.store.grad_mut(self.ids.rotations).chunks_exact_mut(4).zip(&d_canon.rotations) {
            for k in 0..4 {
                g[k] += d[k];
            }
        }
        Ok(())
    }

    /// Checkpoint holding every parameter plus what is needed to rebuild the model.
    pub fn to_checkpoint(&self, build_id: &str, run_config: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(build_id, run_config);
        ck.insert_store(&self.store);
        let rig: serde_json::Value = serde_json::from_str(&self.rig.to_json()).expect("rig json");
        let meta = [
            ("rig", rig),
            ("model", serde_json::to_value(&self.config).expect("model config")),
            ("ablation", serde_json::to_value(self.ablation).expect("ablation")),
            ("ablations_active", serde_json::to_value(self.ablation.active()).expect("names")),
            ("latent_frames", self.latents.frames.into()),
        ];
        for (k, v) in meta {
            ck.metadata.insert(k.into(), v);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let field = |k: &str| {
            ck.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| NnError::Checkpoint(format!("metadata is missing {k:?}")))
        };
        let bad = |e: serde_json::Error| NnError::Checkpoint(e.to_string());
        let rig = Rig::from_json(&field("rig")?.to_string())?;
        let config: ModelConfig = serde_json::from_value(field("model")?).map_err(bad)?;
        let ablation: Ablation = serde_json::from_value(field("ablation")?).map_err(bad)?;
        let frames: usize = serde_json::from_value(field("latent_frames")?).map_err(bad)?;
        let mut model = Self::new(rig, config, ablation, frames, 0)?;
        ck.load_into(&mut model.store)?;
        Ok(model)
    }

    /// Mean squared residual between predicted and reference skinning weights.
    pub fn skin_loss(&self, samples: &[SurfaceSample]) -> Result<f64, ModelError> {
        let xs: Vec<Vector3<f64>> = samples.iter().map(|s| s.position).collect();
        let w = self.skinning.weights(&self.store, &xs)?;
        crate::train::losses::skin_loss(&w, samples).map(|(l, _)| l)
    }

    /// Skinning loss with its gradient, scaled by `weight`, accumulated into the store.
    pub fn skin_loss_backward(&mut self, samples: &[SurfaceSample], weight: f64) -> Result<f64, ModelError> {
        let xs: Vec<Vector3<f64>> = samples.iter().map(|s| s.position).collect();
        let w = self.skinning.forward(&self.store, &xs)?;
        let (loss, mut grad) = crate::train::losses::skin_loss(&w, samples)?;
        grad *= weight;
        self.skinning.backward(&mut self.store, &grad)?;
        Ok(loss)
    }

    /// Renders the canonical cloud directly, without deformation or
    /// skinning; colors use zero motion features.
    pub fn render_canonical(&self, cam: &Camera, latent: Option<usize>) -> Result<RenderOutput, ModelError> {
        let cloud = self.canonical();
        let covs = cloud
            .rotations
            .iter()
            .zip(&cloud.log_scales)
            .map(|(r, s)| build_covariance(r, s))
            .collect::<Result<Vec<_>, _>>()?;
        let eye = cam.center();
        let dirs = cloud
            .positions
            .iter()
            .map(|x| crate::appearance::view_direction(x, &eye))
            .collect::<Result<Vec<_>, _>>()?;
        let z_r = self.latents.latent(&self.store, latent);
        let f_mt = Array2::zeros((cloud.len(), self.config.motion.appearance_dim));
        let rgb = self.color.shade(
            &self.store,
            &ShadeInputs {
                sh: &cloud.sh,
                sh_degree: cloud.sh_degree,
                directions: &dirs,
                motion_features: f_mt.view(),
                frame_latent: &z_r,
            },
        )?;
        let colors: Vec<[f64; 3]> = rgb.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        let opacities: Vec<f64> = cloud.opacity_logits.iter().map(|&l| sigmoid(l)).collect();
        let scene = SplatScene {
            means: &cloud.positions,
            covariances: &covs,
            opacities: &opacities,
            colors: &colors,
        };
        Ok(render(&scene, cam, self.config.background)?.0)
    }
}
