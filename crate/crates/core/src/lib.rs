//! Layout- and style-conditioned image synthesis.
//!
//! A generator turns a layout (labeled boxes on a lattice) plus style codes
//! into an image; its residual blocks are normalized by [`isla`], which
//! spreads per-object affine parameters through predicted soft masks. A
//! projection discriminator scores whole images and ROI-aligned object crops.

pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod isla;
pub mod layout;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod roi;
pub mod training;

pub use candle_core::{DType, Device, Tensor};
pub use error::{Error, Result};
pub use discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorScores};
pub use generator::{Generator, GeneratorConfig, GeneratorOutput};
pub use layout::{BBox, CategorySet, Lattice, Layout, LayoutBatch, LayoutLimits, ObjectSpec, StyleState};
pub use training::{ExperimentConfig, LossReport, TrainConfig, Trainer};
