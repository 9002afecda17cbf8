//! Perception-guided underwater image enhancement.
//!
//! A prompt-pair quality scorer is learned on opinion-scored images, then any
//! shape-preserving enhancement network is trained under pixel L1, a
//! perception hinge loss and a curriculum contrastive regularizer whose
//! negatives are re-weighted by the scorer as training progresses.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod enhancer;
pub mod error;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod negatives;
pub mod optim;
pub mod parallel;
pub mod perception;
pub mod report;
pub mod trainer;

pub use candle_core::DType;
pub use error::{Error, Result};
pub use image::ImageTensor;
pub use parallel::Parallelism;
