//! Identification of XR users from non-specific motion.
//!
//! The pipeline preprocesses head/hand tracking streams into body-relative
//! acceleration features, trains a recurrent embedding network with metric
//! losses, and identifies users by nearest-neighbor majority voting over an
//! extensible reference database. Enrolling a new user only appends
//! embeddings to the database; the model itself is never retrained.

pub mod error;
pub mod eval;
pub mod features;
pub mod format;
pub mod identify;
pub mod index;
pub mod kv;
pub mod model_io;
pub mod geom;
pub mod loss;
pub mod motion;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod numeric;
pub mod synth;
pub mod train;
pub mod util;

pub use error::{Error, Result};
