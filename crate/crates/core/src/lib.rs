//! Conditional multi-view generation from bird's-eye-view layouts.
//!
//! The pipeline has two stages. Vector-quantized autoencoders ([`vq`]) turn
//! camera images and BEV layouts into token grids. An autoregressive
//! transformer ([`prior`]) then models camera tokens conditioned on BEV
//! tokens and the camera rig, using geometry-aware embeddings
//! ([`sequence`]) and a direction-cosine attention bias ([`attention`]).
//! [`scenegen`] provides procedural scenes and an exact pinhole renderer
//! that doubles as the geometric oracle in tests.

pub mod attention;
pub mod checkpoint;
mod error;
pub mod geometry;
pub mod prior;
pub mod registry;
pub mod scenegen;
pub mod sequence;
pub mod vq;

pub use error::{Error, Result};
