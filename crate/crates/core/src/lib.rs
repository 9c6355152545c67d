//! Predicting bug-report field reassignment from stack traces.
//!
//! The pipeline extracts call sequences from report text ([`trace`]), encodes
//! them as discrete symbols ([`encoding`]), trains families of HMMs on the
//! reassigned and not-reassigned classes ([`hmm`]), and fuses the resulting
//! soft detectors into one Boolean-combination ensemble in ROC space
//! ([`detector`], [`fusion`]). [`pipeline`] orchestrates a field end to end and
//! [`report`] turns ROC points into precision/recall figures.

pub mod detector;
pub mod encoding;
pub mod error;
pub mod fusion;
pub mod hmm;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod trace;

pub use error::{Error, Result};
