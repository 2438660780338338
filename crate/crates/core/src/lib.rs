//! Clean-image feature extraction from a diffusion denoiser.
//!
//! A small pixel-space U-Net is trained as the teacher. A trainable copy of
//! it (the student) sees clean images only and is aligned, through
//! timestep-conditioned projection heads, with the features the teacher
//! produces on noisy inputs. The remaining modules extract, evaluate and
//! analyse those features.

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod consolidator;
pub mod correspondence;
pub mod data;
mod error;
pub mod features;
pub mod nn;
pub mod optim;
pub mod probes;
pub mod schedule;
pub mod stack;

pub use backbone::{BackboneConfig, DenoiserParams, Role};
pub use consolidator::{AlignmentConfig, ProjectionHeadParams};
pub use error::{Error, Result};
pub use schedule::{NoiseSchedule, ScheduleFamily};
pub use stack::{FeatureMap, FeatureStack, InputKind, Provenance, TapBatch};
