//! Local sentiment aggregation for aspect-based sentiment classification.

pub mod corpus;
pub mod distance;
pub mod encoder;
pub mod error;
pub mod lsa;
pub mod training;

pub use error::{Error, ErrorKind, Result};
