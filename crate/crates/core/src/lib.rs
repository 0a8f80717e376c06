//! Conditional adversarial autoencoder (CAAE) for age progression and regression.
//!
//! An encoder maps a face to a tanh-bounded latent code, a generator renders a face
//! from the code concatenated with a ten-bin age label, and two discriminators
//! regularize the pair: one pushes codes toward a uniform prior, the other judges
//! (face, age) pairs for realism.
//!
//! This crate is `no_std` + `alloc`. It holds everything numeric: data encodings and
//! the synthetic face generator, the four networks with hand-written backward
//! passes, the loss terms, the ADAM training step, latent traversal, and the
//! evaluation metrics. File formats, checkpoints and the command line live in the
//! `caae` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod layers;
mod math;
pub mod networks;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use data::{AgeLabel, Batch, Image, ImageBatch, NUM_AGE_BINS};
pub use error::{Error, Result};
pub use networks::{LatentBatch, ModelParams, NetworkConfig};
pub use objectives::{LossReport, LossWeights};
pub use trainer::{TrainConfig, TrainState};
