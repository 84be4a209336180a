//! Nucleus instance segmentation with distribution-aware re-coloring and
//! normalization.

pub mod checkpoint;
pub mod config;
pub mod dain;
pub mod data;
pub mod error;
pub mod infer;
mod init;
pub mod io;
pub mod metrics;
pub mod network;
pub mod norm;
pub mod plane;
pub mod recolor;
pub mod stress;
pub mod train;

pub use error::{DarcError, Result};
pub use plane::{ImagePlane, InstanceLabelMap};
