//! Anomaly segmentation by edge-conditioned reconstruction and Siamese patch scoring.

pub mod augment;
pub mod canny;
pub mod checkpoint;
pub mod error;
pub mod image;
pub mod infer;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod otsu;
pub mod preprocess;
pub mod recon;
pub mod rng;
pub mod siamese;
pub mod synth;

pub use error::{CoreError, Result};
pub use image::{EdgeMap, Grid, Image2D, Mask, Modality};
