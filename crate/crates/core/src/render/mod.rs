//! Differentiable tile-based splatting of world-space Gaussians.

pub mod camera;
pub mod image_io;
pub mod project;
pub mod raster;

use nalgebra::{Matrix3, Vector3};

pub use camera::{Camera, CameraRecord};
pub use project::{project, project_backward, Splat2D};
pub use raster::{rasterize, rasterize_backward, RasterState, RenderOutput, ShadedSplat, SplatGrads};

use crate::error::{check_len, ModelError};
use crate::nnkit::NnError;

/// World-space Gaussians ready for splatting.
#[derive(Debug, Clone, Copy)]
pub struct SplatScene<'a> {
    pub means: &'a [Vector3<f64>],
    pub covariances: &'a [Matrix3<f64>],
    pub opacities: &'a [f64],
    pub colors: &'a [[f64; 3]],
}

impl SplatScene<'_> {
    fn check(&self) -> Result<(), ModelError> {
        let n = self.means.len();
        check_len("covariances", n, self.covariances.len())?;
        check_len("opacities", n, self.opacities.len())?;
        check_len("colors", n, self.colors.len())
    }
}

/// Gradients of a render w.r.t. every Gaussian; culled ones stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads {
    pub means: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct RenderState {
    raster: RasterState,
    /// Gaussian index of every kept splat.
    kept: Vec<usize>,
    count: usize,
}

impl RenderState {
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }
}

/// Projection followed by rasterization.
pub fn render(scene: &SplatScene, cam: &Camera, background: [f64; 3]) -> Result<(RenderOutput, RenderState), ModelError> {
    scene.check()?;
    let mut kept = Vec::new();
    let mut splats = Vec::new();
    for i in 0..scene.means.len() {
        if let Some(s) = project(&scene.means[i], &scene.covariances[i], cam) {
            kept.push(i);
            splats.push(ShadedSplat {
                splat: s,
                opacity: scene.opacities[i],
                color: scene.colors[i],
            });
        }
    }
    let (out, raster) = rasterize(&splats, background, cam.width, cam.height)?;
    Ok((
        out,
        RenderState {
            raster,
            kept,
            count: scene.means.len(),
        },
    ))
}

pub fn render_backward(
    state: &RenderState,
    scene: &SplatScene,
    cam: &Camera,
    d_color: &[f64],
    d_alpha: &[f64],
) -> Result<SceneGrads, ModelError> {
    check_len("scene size", state.count, scene.means.len())?;
    let g = rasterize_backward(&state.raster, d_color, d_alpha)?;
    let n = state.count;
    let mut out = SceneGrads {
        means: vec![Vector3::zeros(); n],
        covariances: vec![Matrix3::zeros(); n],
        opacities: vec![0.0; n],
        colors: vec![[0.0; 3]; n],
    };
    for (k, &i) in state.kept.iter().enumerate() {
        let (dm, dc) = project_backward(&scene.means[i], &scene.covariances[i], cam, &g.means[k], &g.covs[k]);
        out.means[i] = dm;
        out.covariances[i] = dc;
        out.opacities[i] = g.opacities[k];
        out.colors[i] = g.colors[k];
    }
    Ok(out)
}

/// Holds the latest forward state so that backward can only follow a forward.
#[derive(Debug, Default)]
pub struct Rasterizer {
    state: Option<RenderState>,
}

impl Rasterizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, scene: &SplatScene, cam: &Camera, background: [f64; 3]) -> Result<RenderOutput, ModelError> {
        let (out, st) = render(scene, cam, background)?;
        self.state = Some(st);
        Ok(out)
    }

    pub fn backward(&mut self, scene: &SplatScene, cam: &Camera, d_color: &[f64], d_alpha: &[f64]) -> Result<SceneGrads, ModelError> {
        let st = self
            .state
            .take()
            .ok_or_else(|| NnError::NoForwardCache("rasterizer".into()))?;
        render_backward(&st, scene, cam, d_color, d_alpha)
    }
}
