//! Intracranial hemorrhage detection on head CT.
//!
//! The pipeline classifies each slice of a CT scan into six binary targets
//! (any hemorrhage plus five subtypes) in three stages: a convolutional
//! slice encoder turns windowed HU images into embeddings, a feature
//! selector shrinks the embeddings, and a bidirectional LSTM rescores each
//! slice with scan-level context. Everything runs on a small self-contained
//! reverse-mode autodiff core in `f64`; checkpoints store `f32`.
//!
//! The `hemoscan` binary drives the stages as subcommands (`synth`,
//! `train-cnn`, `extract`, `fit-selector`, `train-lstm`, `predict`,
//! `evaluate`, `gradcam`); see [`commands`] for the file formats each one
//! reads and writes.

pub mod commands;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcam;
pub mod io;
pub mod lstm;
pub mod metrics;
pub mod preprocess;
pub mod select;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

/// Output class order used everywhere: predictions, labels, weights, reports.
pub const CLASS_NAMES: [&str; 6] = [
    "any",
    "epidural",
    "intraparenchymal",
    "intraventricular",
    "subarachnoid",
    "subdural",
];

/// Number of output classes.
pub const NUM_CLASSES: usize = 6;

/// Deterministic RNG used by every stage. Seeded explicitly; never from time.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Derives an independent stream from a base seed, e.g. one per scan.
/// SplitMix64-style mixing so neighboring indices land far apart.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
