//! Deterministic multi-view ground truth: scripted motion, a lagging cloth
//! proxy, and a fixed Gaussian body splatted through the renderer.

pub mod bake;
pub mod cloth;
pub mod dataset;
pub mod motion;

use std::path::PathBuf;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ModelError;
use crate::render::image_io::ImageError;
use crate::render::Camera;
use crate::rig::RigError;

pub use bake::{bake_dataset, BakeSummary, GroundTruthScene};
pub use cloth::{simulate_cloth, ClothParams, ClothProxy, ClothStart};
pub use dataset::{Dataset, Manifest};
pub use motion::{generate_motion, ClipScript, Segment};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid script: {0}")]
    Script(String),
    #[error("unstable cloth simulation: {0}")]
    Unstable(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SynthError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| SynthError::Io { path, source }
    }
}

/// Cameras on a circle around the subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRing {
    pub train_yaw_deg: Vec<f64>,
    #[serde(default)]
    pub test_yaw_deg: Vec<f64>,
    pub elevation_deg: f64,
    pub distance: f64,
    pub target: [f64; 3],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRing {
    fn camera(&self, yaw_deg: f64) -> Camera {
        let (yaw, el) = (yaw_deg.to_radians(), self.elevation_deg.to_radians());
        let target = Vector3::from(self.target);
        let eye = target + Vector3::new(yaw.sin() * el.cos(), el.sin(), yaw.cos() * el.cos()) * self.distance;
        Camera::look_at(eye, target, Vector3::y(), self.focal, self.width, self.height)
    }

    /// `(name, split, camera)` for every train camera followed by every test camera.
    pub fn cameras(&self) -> Vec<(String, &'static str, Camera)> {
        let train = self.train_yaw_deg.iter().enumerate().map(|(i, &y)| (format!("cam{i}"), "train", self.camera(y)));
        let test = self.test_yaw_deg.iter().enumerate().map(|(i, &y)| (format!("test{i}"), "test", self.camera(y)));
        train.chain(test).collect()
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.train_yaw_deg.is_empty() {
            return Err(SynthError::Script("at least one training camera is required".into()));
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) || !(self.distance > 0.0) {
            return Err(SynthError::Script("camera size, focal and distance must be positive".into()));
        }
        Ok(())
    }
}

/// The skirt proxy's layout and look.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClothSpec {
    pub particles: usize,
    pub rings: usize,
    pub top_height: f64,
    pub bottom_height: f64,
    pub top_radius: f64,
    pub bottom_radius: f64,
    /// Isotropic standard deviation of each particle's splat.
    pub sigma: f64,
    pub opacity: f64,
    pub colors: [[f64; 3]; 2],
    #[serde(default)]
    pub params: ClothParams,
}

/// Everything the generator needs; the dataset is a pure function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub subject: String,
    pub seed: u64,
    pub fps: f64,
    pub clips: Vec<ClipScript>,
    pub cameras: CameraRing,
    pub body_gaussians: usize,
    pub cloth: ClothSpec,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.clips.is_empty() {
            return Err(SynthError::Script("no clips".into()));
        }
        for c in &self.clips {
            motion::check_segments(c)?;
        }
        if !(self.fps > 0.0) {
            return Err(SynthError::Script("fps must be positive".into()));
        }
        if self.body_gaussians == 0 {
            return Err(SynthError::Script("body_gaussians must be positive".into()));
        }
        if !(self.cloth.sigma > 0.0) || !(0.0..=1.0).contains(&self.cloth.opacity) {
            return Err(SynthError::Script("cloth sigma must be positive and opacity in [0,1]".into()));
        }
        self.cameras.validate()
    }

    pub fn frame_count(&self) -> usize {
        self.clips.iter().map(|c| c.frames).sum()
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }
}

pub const BUILTINS: [&str; 2] = ["spinstop", "tiny"];

/// Shipped generator scripts by name.
pub fn builtin(name: &str) -> Option<SynthSpec> {
    match name {
        "spinstop" => Some(spinstop()),
        "tiny" => Some(tiny()),
        _ => None,
    }
}

fn spin(start: usize) -> Segment {
    Segment::Spin {
        start,
        frames: 80,
        rate: 2.5,
        ease_frames: 4,
    }
}

/// Two 240-frame clips that end in the same pose after a spin. Clip 0 holds
/// for 100 frames after stopping, clip 1 for only 10, so its skirt is still
/// swinging on the shared terminal poses.
pub fn spinstop() -> SynthSpec {
    let settle = ClipScript {
        name: "sway_spin_settle".into(),
        frames: 240,
        segments: vec![
            Segment::Hold { start: 0, frames: 10 },
            Segment::Sway {
                start: 10,
                frames: 50,
                amplitude: 0.4,
                period_frames: 25.0,
            },
            spin(60),
            Segment::Hold { start: 140, frames: 100 },
        ],
    };
    let abrupt = ClipScript {
        name: "flap_sway_spin_stop".into(),
        frames: 240,
        segments: vec![
            Segment::ArmFlap {
                start: 0,
                frames: 50,
                amplitude: 0.6,
                period_frames: 25.0,
            },
            Segment::Sway {
                start: 50,
                frames: 60,
                amplitude: 0.35,
                period_frames: 30.0,
            },
            Segment::Hold { start: 110, frames: 40 },
            spin(150),
            Segment::Hold { start: 230, frames: 10 },
        ],
    };
    SynthSpec {
        subject: "spinstop".into(),
        seed: 7,
        fps: 30.0,
        clips: vec![settle, abrupt],
        cameras: CameraRing {
            train_yaw_deg: vec![0.0, 120.0, 240.0],
            test_yaw_deg: vec![60.0],
            elevation_deg: 10.0,
            distance: 3.0,
            target: [0.0, 0.9, 0.0],
            focal: 410.0,
            width: 256,
            height: 256,
        },
        body_gaussians: 2000,
        cloth: ClothSpec {
            particles: 400,
            rings: 8,
            top_height: 0.90,
            bottom_height: 0.585,
            top_radius: 0.17,
            bottom_radius: 0.24,
            sigma: 0.022,
            opacity: 0.9,
            colors: [[0.8, 0.25, 0.2], [0.9, 0.7, 0.3]],
            params: ClothParams::default(),
        },
    }
}

/// A 30-frame, small-image variant for fast tests.
pub fn tiny() -> SynthSpec {
    let mut s = spinstop();
    s.subject = "tiny".into();
    s.clips = vec![ClipScript {
        name: "spin_stop".into(),
        frames: 30,
        segments: vec![
            Segment::Spin {
                start: 0,
                frames: 20,
                rate: 3.0,
                ease_frames: 3,
            },
            Segment::Hold { start: 20, frames: 10 },
        ],
    }];
    s.cameras.width = 64;
    s.cameras.height = 64;
    s.cameras.focal = 102.5;
    s.body_gaussians = 600;
    s.cloth.particles = 120;
    s.cloth.rings = 4;
    s.cloth.sigma = 0.03;
    s
}
