//! Video re-identification with a recurrent or feed-forward temporal stage
//! over per-frame features, Siamese training in sequence (SEQ) or frame
//! (FRM) mode, and CMC evaluation.

pub mod cli;
pub mod dataio;
pub mod encoder;
pub mod evaluation;
pub mod seqstage;
pub mod tensorcore;
pub mod trainer;

mod binio;
mod error;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
