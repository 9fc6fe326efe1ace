//! Ground-truth scene and dataset writer.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::Array2;
use rayon::prelude::*;

use super::cloth::{simulate_cloth, ClothProxy, ClothStart};
use super::dataset::{ClipInfo, Manifest, DATASET_FORMAT, DATASET_VERSION};
use super::motion::generate_motion;
use super::{SynthError, SynthSpec};
use crate::gaussian::knn::mean_neighbor_distance;
use crate::human_transform::rigid_transform;
use crate::render::image_io::{save_mask, save_png};
use crate::render::{render, Camera, RenderOutput, SplatScene};
use crate::rig::{capsule_weights, forward_kinematics, poses_to_json, sample_surface, BodyPart, Pose, Rig};

const SHIRT: [f64; 3] = [0.15, 0.45, 0.6];
const SHIRT_STRIPE: [f64; 3] = [0.3, 0.6, 0.72];
const SKIN: [f64; 3] = [0.85, 0.65, 0.5];
const TROUSERS: [f64; 3] = [0.2, 0.2, 0.35];
const SHOES: [f64; 3] = [0.08, 0.06, 0.06];
const BODY_OPACITY: f64 = 0.95;
const SURFEL_THICKNESS: f64 = 0.003;
const SURFEL_SPREAD: f64 = 0.4;

fn body_color(rig: &Rig, bone: usize, x: &Vector3<f64>) -> [f64; 3] {
    let b = &rig.bones()[bone];
    let n = b.name.as_str();
    let is = |keys: &[&str]| keys.iter().any(|k| n.contains(k));
    if is(&["head", "neck", "elbow", "wrist", "hand"]) {
        SKIN
    } else if is(&["ankle", "foot"]) {
        SHOES
    } else if b.part == BodyPart::Legs {
        TROUSERS
    } else if b.part == BodyPart::Torso {
        // vertical stripes so turning is visible on the trunk
        let sector = ((x.x.atan2(x.z) + TAU) / TAU * 12.0).floor() as i64;
        if sector % 2 == 0 {
            SHIRT
        } else {
            SHIRT_STRIPE
        }
    } else {
        SHIRT
    }
}

/// Owned splat arrays for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Splats {
    pub means: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl Splats {
    pub fn scene(&self) -> SplatScene<'_> {
        SplatScene {
            means: &self.means,
            covariances: &self.covariances,
            opacities: &self.opacities,
            colors: &self.colors,
        }
    }
}

/// Fixed body surfels skinned with capsule weights, plus the cloth particles.
#[derive(Debug, Clone)]
pub struct GroundTruthScene {
    pub body_positions: Vec<Vector3<f64>>,
    pub body_covariances: Vec<Matrix3<f64>>,
    pub body_weights: Array2<f64>,
    pub body_colors: Vec<[f64; 3]>,
    pub cloth: ClothProxy,
    pub cloth_colors: Vec<[f64; 3]>,
    cloth_covariance: Matrix3<f64>,
    cloth_opacity: f64,
}

impl GroundTruthScene {
    pub fn new(rig: &Rig, spec: &SynthSpec) -> Self {
        let samples = sample_surface(rig, spec.body_gaussians, spec.seed);
        let positions: Vec<Vector3<f64>> = samples.iter().map(|s| s.position).collect();
        let spacing = mean_neighbor_distance(&positions, 3);
        let body_covariances = samples
            .iter()
            .zip(&spacing)
            .map(|(s, d)| {
                let r = Rotation3::rotation_between(&Vector3::z(), &s.normal)
                    .unwrap_or_else(|| Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
                let t = SURFEL_SPREAD * d;
                let scale = Matrix3::from_diagonal(&Vector3::new(t * t, t * t, SURFEL_THICKNESS * SURFEL_THICKNESS));
                r.matrix() * scale * r.matrix().transpose()
            })
            .collect();
        let mut body_weights = Array2::zeros((samples.len(), rig.bone_count()));
        for (mut row, s) in body_weights.rows_mut().into_iter().zip(&samples) {
            for (dst, w) in row.iter_mut().zip(capsule_weights(rig, &s.position)) {
                *dst = w;
            }
        }
        let body_colors = samples.iter().map(|s| body_color(rig, s.bone, &s.position)).collect();
        let c = &spec.cloth;
        let cloth = ClothProxy::skirt(
            c.particles,
            c.rings,
            c.top_height,
            c.bottom_height,
            c.top_radius,
            c.bottom_radius,
            &c.params,
            spec.seed ^ 0x736b_6972_74,
        );
        let cloth_colors = (0..cloth.len()).map(|i| c.colors[usize::from(i % 10 >= 5)]).collect();
        Self {
            body_positions: positions,
            body_covariances,
            body_weights,
            body_colors,
            cloth,
            cloth_colors,
            cloth_covariance: Matrix3::identity() * (c.sigma * c.sigma),
            cloth_opacity: c.opacity,
        }
    }

    /// World-space splats of the posed body followed by `cloth` particles.
    pub fn splats(&self, rig: &Rig, pose: &Pose, cloth: &[Vector3<f64>]) -> Result<Splats, SynthError> {
        let bones = forward_kinematics(rig, pose)?;
        let body = rigid_transform(&self.body_positions, &self.body_covariances, &self.body_weights, &bones)?;
        let nb = body.positions.len();
        let mut out = Splats {
            means: body.positions,
            covariances: body.covariances,
            opacities: vec![BODY_OPACITY; nb],
            colors: self.body_colors.clone(),
        };
        if !cloth.is_empty() {
            if cloth.len() != self.cloth.len() {
                return Err(SynthError::Dataset(format!(
                    "{} cloth positions for {} particles",
                    cloth.len(),
                    self.cloth.len()
                )));
            }
            out.means.extend_from_slice(cloth);
            out.covariances.extend(std::iter::repeat_n(self.cloth_covariance, cloth.len()));
            out.opacities.extend(std::iter::repeat_n(self.cloth_opacity, cloth.len()));
            out.colors.extend_from_slice(&self.cloth_colors);
        }
        Ok(out)
    }

    pub fn render(
        &self,
        rig: &Rig,
        pose: &Pose,
        cloth: &[Vector3<f64>],
        cam: &Camera,
    ) -> Result<RenderOutput, SynthError> {
        let s = self.splats(rig, pose, cloth)?;
        Ok(render(&s.scene(), cam, [0.0; 3])?.0)
    }
}

/// Poses and cloth states of every clip, concatenated in clip order.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub poses: Vec<Pose>,
    pub cloth: Vec<Vec<Vector3<f64>>>,
    pub clips: Vec<ClipInfo>,
}

pub fn simulate(rig: &Rig, spec: &SynthSpec, scene: &GroundTruthScene) -> Result<Simulation, SynthError> {
    spec.validate()?;
    let mut sim = Simulation {
        poses: Vec::with_capacity(spec.frame_count()),
        cloth: Vec::with_capacity(spec.frame_count()),
        clips: Vec::new(),
    };
    for clip in &spec.clips {
        let start = sim.poses.len();
        let poses = generate_motion(rig, clip, spec.fps, start)?;
        let cloth = simulate_cloth(rig, &poses, &scene.cloth, &spec.cloth.params, ClothStart::Settled)?;
        sim.clips.push(ClipInfo {
            name: clip.name.clone(),
            start,
            frames: poses.len(),
        });
        sim.poses.extend(poses);
        sim.cloth.extend(cloth);
    }
    Ok(sim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BakeSummary {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub images: usize,
}

fn write(path: &Path, text: &str) -> Result<(), SynthError> {
    fs::write(path, text).map_err(SynthError::io(path))
}

fn write_manifest(root: &Path, m: &Manifest) -> Result<(), SynthError> {
    write(&root.join("manifest.json"), &serde_json::to_string_pretty(m)?)
}

/// Simulates and renders the whole spec into `root`. The manifest is
/// written first with `valid: false` and flipped only after every file is
/// on disk.
pub fn bake_dataset(spec: &SynthSpec, rig: &Rig, root: &Path) -> Result<BakeSummary, SynthError> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(SynthError::io(root))?;
    let scene = GroundTruthScene::new(rig, spec);
    let sim = simulate(rig, spec, &scene)?;
    let cams = spec.cameras.cameras();
    let mut manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        subject: spec.subject.clone(),
        frame_count: sim.poses.len(),
        fps: spec.fps,
        width: spec.cameras.width,
        height: spec.cameras.height,
        cameras: cams.iter().map(|c| c.0.clone()).collect(),
        clips: sim.clips.clone(),
        seed: spec.seed,
        valid: false,
    };
    write_manifest(root, &manifest)?;
    write(&root.join("rig.json"), &rig.to_json())?;
    write(&root.join("poses.json"), &poses_to_json(&sim.poses))?;
    let records: Vec<_> = cams.iter().map(|(n, s, c)| c.to_record(n, s)).collect();
    write(&root.join("cameras.json"), &serde_json::to_string_pretty(&records)?)?;
    for (name, _, _) in &cams {
        for dir in ["frames", "masks"] {
            let d = root.join(dir).join(name);
            fs::create_dir_all(&d).map_err(SynthError::io(&d))?;
        }
    }
    let (w, h) = (spec.cameras.width, spec.cameras.height);
    (0..sim.poses.len()).into_par_iter().try_for_each(|f| -> Result<(), SynthError> {
        let splats = scene.splats(rig, &sim.poses[f], &sim.cloth[f])?;
        for (name, _, cam) in &cams {
            let out = render(&splats.scene(), cam, [0.0; 3])?.0;
            save_png(&frame_file(root, "frames", name, f), &out.color, w, h)?;
            save_mask(&frame_file(root, "masks", name, f), &out.alpha, w, h)?;
        }
        Ok(())
    })?;
    manifest.valid = true;
    write_manifest(root, &manifest)?;
    Ok(BakeSummary {
        root: root.to_path_buf(),
        images: manifest.frame_count * cams.len(),
        manifest,
    })
}

pub(crate) fn frame_file(root: &Path, kind: &str, camera: &str, frame: usize) -> PathBuf {
    root.join(kind).join(camera).join(format!("{frame:04}.png"))
}

/// Closest distance between the ray `o + t·d` (`t ≥ 0`, `d` unit) and the segment `[a, b]`.
pub fn ray_segment_distance(o: &Vector3<f64>, d: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let e = b - a;
    let r = o - a;
    let ee = e.dot(&e);
    let de = d.dot(&e);
    let dr = d.dot(&r);
    let er = e.dot(&r);
    let point = |t: f64, s: f64| ((o + d * t) - (a + e * s)).norm();
    if ee <= 0.0 {
        return point((-dr).max(0.0), 0.0);
    }
    let denom = ee - de * de;
    let mut s = if denom > 1e-14 { ((er - de * dr) / denom).clamp(0.0, 1.0) } else { 0.0 };
    let mut t = de * s - dr;
    if t < 0.0 {
        t = 0.0;
        s = (er / ee).clamp(0.0, 1.0);
    } else {
        s = ((t * de + er) / ee).clamp(0.0, 1.0);
        t = (de * s - dr).max(0.0);
    }
    point(t, s)
}

/// Pixels whose centre ray hits any posed capsule of the rig.
pub fn capsule_silhouette(rig: &Rig, pose: &Pose, cam: &Camera) -> Result<Vec<bool>, SynthError> {
    let bones = forward_kinematics(rig, pose)?;
    let world = |b: usize, p: Vector3<f64>| (bones[b] * p.push(1.0)).xyz();
    let caps: Vec<_> = (0..rig.bone_count())
        .map(|b| (world(b, rig.head(b)), world(b, rig.tail(b)), rig.radius(b)))
        .collect();
    let eye = cam.center();
    let r_inv = cam.rotation().transpose();
    let mut out = Vec::with_capacity(cam.width * cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let dc = Vector3::new((x as f64 + 0.5 - cam.cx) / cam.fx, (y as f64 + 0.5 - cam.cy) / cam.fy, 1.0);
            let d = (r_inv * dc).normalize();
            out.push(caps.iter().any(|(a, b, r)| ray_segment_distance(&eye, &d, a, b) < *r));
        }
    }
    Ok(out)
}
