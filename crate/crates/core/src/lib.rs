//! Animatable Gaussian-splat avatars whose deformation is conditioned on a
//! window of past poses.
//!
//! Pipeline per frame: partitioned pose → [`latentbone`] feature → LSTM
//! over a pose window ([`motion_trend`]) → per-Gaussian offsets → learned
//! skinning ([`human_transform`]) → shading ([`appearance`]) → tile
//! rasterizer ([`render`]). [`train`] holds the objective and the optimizer
//! loop; [`synth`] produces multi-view ground truth with a lagging cloth proxy.

pub mod nnkit;
pub mod gaussian;
pub mod rig;
pub mod latentbone;
pub mod error;
pub mod motion_trend;
pub mod gradcheck;
pub mod appearance;
pub mod human_transform;
pub mod render;
pub mod model;
pub mod train;
pub mod synth;
