//! Forensic edit-annotation pipeline: ingest image edit triplets, localize
//! the edit, score detection difficulty, categorize the instruction and
//! compose a structured reasoning chain.

pub mod analysis;
pub mod chaincomp;
pub mod difficulty;
pub mod diffmask;
pub mod error;
pub mod evalparse;
pub mod grid;
pub mod ingest;
pub mod pipeline;
pub mod records;
pub mod report;
pub mod stats;
pub mod synth;
pub mod taxonomy;

pub use error::{Error, Result};
