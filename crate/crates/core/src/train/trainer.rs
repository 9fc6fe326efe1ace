//! The optimization loop: one (frame, camera) pair per step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::losses::{self, LossError, LossParts};
use super::metrics::{display_psnr, psnr, ssim, to_display};
use super::perceptual::PerceptualLoss;
use crate::error::ModelError;
use crate::gaussian::GaussianError;
use crate::model::AvatarModel;
use crate::nnkit::{Checkpoint, NnError};
use crate::rig::{sample_surface, SurfaceSample};
use crate::synth::{Dataset, SynthError};

pub const CSV_HEADER: &str = "step,frame,camera,l1,mask,percep,skin,total,psnr";
const POOL_SEED_SALT: u64 = 0x736b_696e_706f_6f6c;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {reason}; parameters from before that step saved to {}", .checkpoint.display())]
    NonFinite {
        step: u64,
        reason: String,
        checkpoint: PathBuf,
    },
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl TrainError {
    /// Whether the error comes from values blowing up rather than from bad input.
    pub fn is_numeric(&self) -> bool {
        let nn = |e: &NnError| matches!(e, NnError::NonFiniteGradient { .. });
        match self {
            Self::NonFinite { .. } | Self::Loss(LossError::NonFinite(_)) => true,
            Self::Nn(e) => nn(e),
            Self::Model(e) => match e {
                ModelError::NonFinite(_)
                | ModelError::NotPositiveDefinite(_)
                | ModelError::ZeroDirection
                | ModelError::Gaussian(GaussianError::DegenerateQuaternion) => true,
                ModelError::Nn(e) => nn(e),
                _ => false,
            },
            _ => false,
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub frame: usize,
    pub camera: usize,
    pub parts: LossParts,
    pub total: f64,
    pub psnr: f64,
}

impl StepRecord {
    pub fn csv_row(&self, camera_name: &str) -> String {
        let p = &self.parts;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.frame, camera_name, p.l1, p.mask, p.perceptual, p.skin, self.total, self.psnr
        )
    }
}

pub struct Trainer<'a> {
    pub data: &'a Dataset,
    pub config: RunConfig,
    pub model: AvatarModel,
    cameras: Vec<usize>,
    perceptual: PerceptualLoss,
    skin_pool: Vec<SurfaceSample>,
    rng: ChaCha8Rng,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, config: RunConfig) -> Result<Self, TrainError> {
        config.validate().map_err(|e| TrainError::Setup(e.to_string()))?;
        let cameras = match &config.data.train_cameras {
            None => data.train_cameras(),
            Some(names) => names
                .iter()
                .map(|n| data.camera_index(n).ok_or_else(|| TrainError::Setup(format!("dataset has no camera {n:?}"))))
                .collect::<Result<_, _>>()?,
        };
        if cameras.is_empty() {
            return Err(TrainError::Setup("no training cameras".into()));
        }
        let seed = config.optim.seed;
        let model = AvatarModel::new(data.rig.clone(), config.model.clone(), config.ablation, data.frame_count(), seed)?;
        let skin_pool = sample_surface(&data.rig, config.loss.skin_pool, seed ^ POOL_SEED_SALT);
        Ok(Self {
            perceptual: PerceptualLoss::new(config.loss.perceptual_seed),
            rng: ChaCha8Rng::seed_from_u64(seed),
            data,
            config,
            model,
            cameras,
            skin_pool,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self, build_id: &str) -> Checkpoint {
        let cfg = serde_json::to_value(&self.config).expect("config serializes");
        let mut ck = self.model.to_checkpoint(build_id, cfg);
        ck.step = self.step;
        ck
    }

    /// Forward, loss, backward and one Adam update. On a non-finite loss or
    /// gradient nothing is updated and the error is returned.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let frame = self.rng.gen_range(0..self.data.frame_count());
        let camera = self.cameras[self.rng.gen_range(0..self.cameras.len())];
        let picks = rand::seq::index::sample(&mut self.rng, self.skin_pool.len(), self.config.loss.skin_samples);
        let batch: Vec<SurfaceSample> = picks.iter().map(|i| self.skin_pool[i].clone()).collect();
        let (gt, mask) = self.data.load_view(camera, frame)?;
        let cam = &self.data.cameras[camera].camera;
        let (w, h) = (cam.width, cam.height);
        let query = self.data.query(frame)?;
        let out = match self.model.forward(&query, cam) {
            Ok(o) => o,
            Err(e) => {
                self.model.clear_cache();
                return Err(e.into());
            }
        };
        let weights = self.config.loss.weights;
        let skin_w = self.config.skin_weight(self.step);
        let (l1, d_l1) = losses::l1(&out.color, &gt, self.config.loss.masked_l1.then_some(&mask[..]))?;
        let (mask_l, d_mask) = losses::mask_loss(&out.alpha, &mask)?;
        let (percep, d_percep) = if weights.perceptual > 0.0 {
            self.perceptual.loss_grad(&out.color, &gt, w, h)?
        } else {
            (0.0, vec![0.0; out.color.len()])
        };
        let skin = self.model.skin_loss_backward(&batch, skin_w)?;
        let parts = LossParts {
            l1,
            mask: mask_l,
            perceptual: percep,
            skin,
        };
        let effective = losses::LossWeights { skin: skin_w, ..weights };
        let total = match losses::total(&parts, &effective) {
            Ok(t) => t,
            Err(e) => {
                self.model.clear_cache();
                self.model.store.zero_grad();
                return Err(e.into());
            }
        };
        let d_color: Vec<f64> = d_l1.iter().zip(&d_percep).map(|(a, b)| a + weights.perceptual * b).collect();
        let d_alpha: Vec<f64> = d_mask.iter().map(|g| weights.mask * g).collect();
        self.model.backward(&d_color, &d_alpha)?;
        if let Err(e) = self.model.store.adam_step(&self.config.optim.lr, &self.config.optim.adam) {
            self.model.store.zero_grad();
            return Err(e.into());
        }
        self.model.renormalize()?;
        let record = StepRecord {
            step: self.step,
            frame,
            camera,
            parts,
            total,
            psnr: display_psnr(&out.color, &gt)?,
        };
        self.step += 1;
        Ok(record)
    }
}

/// Outcome of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub last: Option<StepRecord>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    fs::write(path, bytes).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs `config.optim.iterations` steps, writing `loss.csv`, periodic
/// `step_XXXXXX.ckpt` files and `final.ckpt` into `out`. `progress` sees
/// every logged row.
pub fn train(
    data: &Dataset,
    config: RunConfig,
    out: &Path,
    build_id: &str,
    mut progress: impl FnMut(&StepRecord),
) -> Result<RunReport, TrainError> {
    fs::create_dir_all(out).map_err(|source| TrainError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let mut trainer = Trainer::new(data, config)?;
    let iters = trainer.config.optim.iterations;
    let log_every = trainer.config.optim.log_every;
    let ck_every = trainer.config.optim.checkpoint_every;
    let log_path = out.join("loss.csv");
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    write_file(&log_path, csv.as_bytes())?;
    let mut last = None;
    for s in 0..iters {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e) if e.is_numeric() => {
                let checkpoint = out.join("last_good.ckpt");
                trainer.checkpoint(build_id).save(&checkpoint)?;
                write_file(&log_path, csv.as_bytes())?;
                return Err(TrainError::NonFinite {
                    step: s,
                    reason: e.to_string(),
                    checkpoint,
                });
            }
            Err(e) => return Err(e),
        };
        if s % log_every == 0 || s + 1 == iters {
            let name = &data.cameras[rec.camera].name;
            let _ = writeln!(csv, "{}", rec.csv_row(name));
            progress(&rec);
        }
        if ck_every > 0 && (s + 1) % ck_every == 0 && s + 1 < iters {
            trainer.checkpoint(build_id).save(&out.join(format!("step_{:06}.ckpt", s + 1)))?;
            write_file(&log_path, csv.as_bytes())?;
        }
        last = Some(rec);
    }
    write_file(&log_path, csv.as_bytes())?;
    let checkpoint = out.join("final.ckpt");
    trainer.checkpoint(build_id).save(&checkpoint)?;
    Ok(RunReport {
        steps: iters,
        checkpoint,
        log: log_path,
        last,
    })
}

/// Mean metrics of a model over a set of dataset views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub views: usize,
}

/// Renders every `(camera, frame)` pair, quantizes it as a PNG would be,
/// and averages PSNR and SSIM of the encoded values against the dataset
/// images. Frames use their own latent row.
pub fn evaluate(
    model: &mut AvatarModel,
    data: &Dataset,
    cameras: &[usize],
    frames: &[usize],
) -> Result<EvalSummary, TrainError> {
    let mut total_psnr = 0.0;
    let mut total_ssim = 0.0;
    let mut views = 0;
    for &c in cameras {
        let cam = &data.cameras[c].camera;
        for &f in frames {
            let out = model.render(&data.query(f)?, cam)?;
            let (gt, _) = data.load_view(c, f)?;
            let pred = to_display(&crate::render::image_io::round_trip_srgb8(&out.color));
            let gt = to_display(&gt);
            total_psnr += psnr(&pred, &gt)?;
            total_ssim += ssim(&pred, &gt, cam.width, cam.height)?;
            views += 1;
        }
    }
    let n = views.max(1) as f64;
    Ok(EvalSummary {
        psnr: total_psnr / n,
        ssim: total_ssim / n,
        views,
    })
}
