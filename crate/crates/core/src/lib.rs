//! Colon shape estimation from colonoscope shape sequences.
//!
//! A colonoscope shape (sensed points with tangent directions) is turned into
//! structure and pairwise relation features; a convolutional + LSTM network
//! maps a window of past frames to the current positions of the colon
//! markers. The crate also contains ICP registration, a regression-forest
//! baseline, a synthetic insertion simulator, the evaluation harness and the
//! file formats used by the `sen` command-line tool.

pub mod baseline;
pub mod dataio;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod model;
pub mod neural;
pub mod recording;
pub mod registration;
pub mod simulator;

pub use geometry::{ColonFrame, Direction3, Point3, RigidTransform, ScopeFrame};
pub use recording::{FramePair, InsertionRecording};

/// Deterministic child seed for stream `index` of a master seed (SplitMix64
/// finalizer), used for per-tree, per-recording and per-fold generators.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
