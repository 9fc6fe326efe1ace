//! Finite-difference verification of every differentiable operation.

pub mod fd;
pub mod suite;

pub use fd::{central_difference, numeric_gradient, numeric_param_gradient, relative_error, sample_coordinates, worst_relative_error, FD_STEP};
pub use suite::{pipeline, run_suite, OpReport, PipelineCase, FULL_LOSS_PIPELINE, MICRO_PIPELINE, OP_TOLERANCE, PIPELINE_TOLERANCE};
