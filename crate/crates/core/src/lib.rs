//! Visually grounded masked language modeling at desk scale.
//!
//! Two families of grounding are supported around a two-stage text encoder
//! followed by a cross-modal encoder: *transferred* grounding, where a
//! trainable placeholder vector stands in for missing images, and
//! *associative* grounding, where each text retrieves `K` related images
//! from a key/value archive before it is encoded.

pub mod assoc;
mod binio;
pub mod downstream;
pub mod embed;
pub mod error;
pub mod model;
pub mod tensorcore;
pub mod toydata;
pub mod train;
pub mod vindex;

pub use error::{Error, Result};
