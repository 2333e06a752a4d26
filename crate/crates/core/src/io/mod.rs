//! On-disk formats.
//!
//! Binary formats are little-endian and fully validated on read: a bad
//! magic, version, dimension, or size fails with the byte offset. Text
//! formats report line numbers.
//!
//! - [`ctv`]: raw CT volumes (`.ctv`)
//! - [`checkpoint`]: named `f32` array containers for model weights,
//!   selectors, and extracted features
//! - [`labels`]: JSON label sidecars next to each volume
//! - [`predictions`]: the `ID,Label` prediction table

pub mod checkpoint;
pub mod ctv;
pub mod features;
pub mod labels;
pub mod predictions;

pub use checkpoint::Checkpoint;
pub use ctv::{read_ctv, write_ctv, HuVolume};
pub use features::{FeatureSet, ScanFeatures};
pub use labels::{sidecar_path, LabelSidecar};
pub use predictions::PredictionTable;
