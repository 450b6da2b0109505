//! steamlab: a desk-scale laboratory for semantic-level knowledge editing.
//!
//! The crate covers the full loop: generate a synthetic fact corpus
//! ([`factlang`]), train a small decoder-only transformer on it ([`model`]),
//! apply rank-one knowledge edits with or without latent alignment
//! ([`editor`], [`anchors`]), inspect the residual stream ([`analysis`]),
//! and score edits with the usual six metrics ([`evalsuite`]).

pub mod analysis;
pub mod anchors;
pub mod editor;
pub mod error;
pub mod evalsuite;
pub mod factlang;
pub mod fsio;
pub mod linalg;
pub mod model;
pub mod seeds;

pub use error::{Error, Result};
