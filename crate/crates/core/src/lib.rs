//! Cooperative perception over simulated LIDAR.
//!
//! Synthetic scenes are ray-cast into point clouds, rendered as bird's-eye
//! view grids and fed to a small convolutional detector. Vehicles cooperate
//! by sharing raw clouds (RIS), intermediate feature maps (DFS) or final
//! detections (HSM). The crate trains the detector, runs the three pipelines
//! and scores them under GPS noise and growing numbers of participants.
//!
//! Module map:
//!
//! - [`worldgen`], [`dataset`]: scenes, ray casting, on-disk frames
//! - [`bev`]: point clouds to height-binned density grids
//! - [`nn`]: tensors, layers, backward passes, weight files
//! - [`detector`]: anchors, decode, loss, rotated IoU, NMS
//! - [`align`], [`aggregate`]: lattice padding, canvas placement, fusion
//! - [`cooperation`], [`wire`]: the pipelines and their V2V messages
//! - [`training`], [`evaluation`]: SVT/CVT training, AP and sweeps
//! - [`config`], [`selftest`]: run configuration and property suites

pub mod aggregate;
pub mod align;
pub mod bev;
pub mod config;
pub mod cooperation;
pub mod dataset;
pub mod detector;
pub mod evaluation;
pub mod geometry;
pub mod nn;
pub mod rng;
pub mod selftest;
pub mod training;
pub mod wire;
pub mod worldgen;

use thiserror::Error;

pub use aggregate::AggregationMode;
pub use config::RunConfig;
pub use cooperation::Method;
pub use training::Strategy;

/// Any failure of the library, for callers that do not care which stage failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Eval(#[from] evaluation::EvalError),
    #[error(transparent)]
    Coop(#[from] cooperation::CoopError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
}
