//! Grounded situation recognition: an image maps to a verb plus a frame of
//! semantic roles, each filled by a noun and an optional box.
//!
//! The pipeline is a two-stage transformer. The encoder reads patch tokens,
//! produces a provisional verb and one feature per role, and postpones the
//! final verb decision. The decoder retrieves the most similar training
//! frames from a feature index and alternately refines noun features (from
//! support-frame verb messages) and the verb feature (from the query's own
//! noun messages) before the prediction heads fire.
//!
//! Everything is deterministic for a fixed seed: parameter init, dropout,
//! data order, and all reductions.

pub mod blocks;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod error;
pub mod params;
pub mod raster;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
