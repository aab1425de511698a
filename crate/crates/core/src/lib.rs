//! Joint entity segmentation and non-projective part-of parsing of
//! real-estate ads by head selection, with pipeline baselines.

pub mod attention;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod joint;
pub mod model;
pub mod mst;
pub mod oracle;
pub mod pipeline;
pub mod selftest;
pub mod train;

pub use error::{Error, Result};
