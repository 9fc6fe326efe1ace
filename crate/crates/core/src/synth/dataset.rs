//! On-disk dataset: manifest, cameras, poses, rig, and per-camera frames.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bake::frame_file;
use super::SynthError;
use crate::model::FrameQuery;
use crate::render::image_io::{load_mask, load_png};
use crate::render::{Camera, CameraRecord};
use crate::rig::{poses_from_json, Pose, Rig};

pub const DATASET_FORMAT: &str = "avatar-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipInfo {
    pub name: String,
    pub start: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub subject: String,
    pub frame_count: usize,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<String>,
    pub clips: Vec<ClipInfo>,
    pub seed: u64,
    /// False while a bake is in progress or after it failed.
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct DatasetCamera {
    pub name: String,
    pub test: bool,
    pub camera: Camera,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub rig: Rig,
    pub cameras: Vec<DatasetCamera>,
    pub poses: Vec<Pose>,
}

fn read(path: &Path) -> Result<String, SynthError> {
    fs::read_to_string(path).map_err(SynthError::io(path))
}

fn bad(msg: String) -> SynthError {
    SynthError::Dataset(msg)
}

impl Dataset {
    /// Loads and cross-checks a baked dataset; every referenced image must exist.
    pub fn load(root: &Path) -> Result<Self, SynthError> {
        let manifest: Manifest = serde_json::from_str(&read(&root.join("manifest.json"))?)?;
        if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
            return Err(bad(format!(
                "unsupported dataset {:?} version {} (expected {DATASET_FORMAT:?} version {DATASET_VERSION})",
                manifest.format, manifest.version
            )));
        }
        if !manifest.valid {
            return Err(bad(format!("{} is marked invalid (incomplete bake)", root.display())));
        }
        let rig = Rig::load(&root.join("rig.json"))?;
        let poses = poses_from_json(&read(&root.join("poses.json"))?, &rig)?;
        let records: Vec<CameraRecord> = serde_json::from_str(&read(&root.join("cameras.json"))?)?;
        let mut cameras = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let camera = Camera::from_record(r).map_err(|e| bad(format!("camera {i}: {e}")))?;
            let name = r.name.clone().unwrap_or_else(|| format!("cam{i}"));
            if (camera.width, camera.height) != (manifest.width, manifest.height) {
                return Err(bad(format!("camera {name} size differs from the manifest")));
            }
            cameras.push(DatasetCamera {
                name,
                test: r.split.as_deref() == Some("test"),
                camera,
            });
        }
        let names: Vec<&str> = cameras.iter().map(|c| c.name.as_str()).collect();
        if names != manifest.cameras.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(bad("cameras.json does not match the manifest camera list".into()));
        }
        if poses.len() != manifest.frame_count || poses.iter().enumerate().any(|(i, p)| p.frame != i) {
            return Err(bad("pose frames must be contiguous from 0 and match frame_count".into()));
        }
        let mut next = 0;
        for c in &manifest.clips {
            if c.start != next || c.frames == 0 {
                return Err(bad(format!("clip {:?} does not start where the previous one ends", c.name)));
            }
            next += c.frames;
        }
        if next != manifest.frame_count {
            return Err(bad("clips do not cover every frame".into()));
        }
        let ds = Self {
            root: root.to_path_buf(),
            manifest,
            rig,
            cameras,
            poses,
        };
        for c in &ds.cameras {
            for f in 0..ds.manifest.frame_count {
                for p in [ds.image_path(&c.name, f), ds.mask_path(&c.name, f)] {
                    if !p.is_file() {
                        return Err(bad(format!("missing {}", p.display())));
                    }
                }
            }
        }
        Ok(ds)
    }

    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    pub fn train_cameras(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&i| !self.cameras[i].test).collect()
    }

    pub fn test_cameras(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&i| self.cameras[i].test).collect()
    }

    pub fn camera_index(&self, name: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.name == name)
    }

    pub fn clip_of(&self, frame: usize) -> Option<&ClipInfo> {
        self.manifest.clips.iter().find(|c| (c.start..c.start + c.frames).contains(&frame))
    }

    /// The frame's own clip as the pose track, latent row = global frame.
    pub fn query(&self, frame: usize) -> Result<FrameQuery<'_>, SynthError> {
        let c = self
            .clip_of(frame)
            .ok_or_else(|| bad(format!("frame {frame} is outside the dataset")))?;
        Ok(FrameQuery {
            track: &self.poses[c.start..c.start + c.frames],
            index: frame - c.start,
            latent: Some(frame),
        })
    }

    pub fn image_path(&self, camera: &str, frame: usize) -> PathBuf {
        frame_file(&self.root, "frames", camera, frame)
    }

    pub fn mask_path(&self, camera: &str, frame: usize) -> PathBuf {
        frame_file(&self.root, "masks", camera, frame)
    }

    /// Linear RGB image and binary mask of one view.
    pub fn load_view(&self, camera: usize, frame: usize) -> Result<(Vec<f64>, Vec<f64>), SynthError> {
        let name = &self.cameras[camera].name;
        let (rgb, w, h) = load_png(&self.image_path(name, frame))?;
        let (mask, mw, mh) = load_mask(&self.mask_path(name, frame))?;
        if (w, h) != (self.manifest.width, self.manifest.height) || (mw, mh) != (w, h) {
            return Err(bad(format!("view {name}/{frame} has the wrong size")));
        }
        Ok((rgb, mask))
    }
}
