//! Geometric analysis of attention heads as top-N selectors in value space.
//!
//! The crate reads activation dumps ([`dump_io`]), measures top-N separability
//! ([`geometry`]), fits the norm / similarity / attention-profile models
//! ([`assumptions`]), evaluates the closed-form envelopes ([`bounds`]),
//! generates synthetic heads that realise the models ([`synthetic`]),
//! classifies heads ([`taxonomy`]) and plans head removal ([`sparsify`]).

pub mod assumptions;
pub mod bounds;
pub mod dump_io;
pub mod error;
pub mod geometry;
pub mod sparsify;
pub mod synthetic;
pub mod taxonomy;

mod stats;

pub use error::{Error, Result};
