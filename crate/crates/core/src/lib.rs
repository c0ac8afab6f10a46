//! Global time-frequency context modeling for speaker embeddings.
//!
//! Layers, from the bottom up:
//!
//! - [`tensor`]: dense `f64` tensors, a tape-based reverse-mode graph, and a
//!   central-difference gradient checker.
//! - [`dct`]: unnormalized 2D-DCT basis grids and their low-frequency ordering.
//! - [`blocks`]: SE, attention and multi-DCT context blocks, channel transforms
//!   (FC bottleneck or ECA-style 1D convolution) and time-frequency enhancement.
//! - [`backbone`]: residual embedder with configurable block insertion and
//!   attentive statistics pooling.
//! - [`loss`] and [`optim`]: angular prototypical + softmax objectives, AdamW,
//!   and the warm-up / step-decay schedule.
//! - [`features`] and [`synth`]: WAV I/O, log-mel filterbanks, chunking, and a
//!   deterministic synthetic speaker corpus.
//! - [`metrics`]: cosine scoring, EER, minDCF and DET points.

pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod dct;
mod error;
pub mod features;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
