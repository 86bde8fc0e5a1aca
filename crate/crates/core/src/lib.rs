//! Multiple-choice question answering on top of a small transformer
//! encoder. Candidates can be scored one per pass, with all candidates
//! appended to the question, or all together in a single pass followed by
//! an optional gated interaction between answer vectors.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod layout;
pub mod model;
pub mod pooling;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
