//! Placental MRI segmentation pipeline: a U-Net and a SegNeXt-S style network
//! combined through test-time augmentation and a thresholded mask union.
//!
//! The modules follow the data flow: [`dataio`] loads and standardizes
//! slices, [`geometry`] supplies the affine transforms used for augmentation
//! and TTA, [`models`] holds the two backbones, [`objectives`] the loss,
//! metrics and paired tests, [`training`] cross-validation, and
//! [`inference`] the single-model TTA and the two-model ensemble.

pub mod dataio;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod inference;
pub mod models;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
pub use grid::{BinMask, Grid, Image, ProbMap};

/// Side length of every standardized canvas and model input.
pub const STANDARD_SIDE: usize = 256;

/// Maximum slices kept per patient.
pub const MAX_SLICES_PER_PATIENT: usize = 5;
