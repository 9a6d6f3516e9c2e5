//! Object-centric video learning with slot attention and a discrete-token
//! transformer decoder, plus a synthetic video generator, FG-ARI metrics and a
//! mixture-decoder probe.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod diagnostic;
pub mod dvae;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod slot_encoder;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
