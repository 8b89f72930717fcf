//! Quality-control toolkit for crowdsourced bounding-box annotation:
//! consensus ground truth from multi-annotator event logs (Majority Voting
//! and a STAPLE-style EM), disagreement/difficulty scoring for image
//! curation, stratified splitting, and COCO-style detector evaluation,
//! with a deterministic campaign simulator for end-to-end checks.

pub mod consensus;
pub mod correspondence;
pub mod curation;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod simulator;

pub use error::{Error, Result};
