//! Knowledge-aware re-optimization of object-detection scores.
//!
//! Label-to-label consistency matrices are built from dataset co-occurrence
//! statistics, from random walks over a concept graph, or from both. The
//! re-optimizer then moves per-box class scores toward agreement with
//! neighboring boxes while staying close to the detector output.

pub mod consistency;
pub mod error;
pub mod eval;
pub mod frequency;
pub mod graph;
pub mod hybrid;
pub mod interchange;
pub mod model;
pub mod reopt;
pub mod sweep;
pub mod synthetic;

pub use consistency::{ConsistencyMatrix, SourceTag};
pub use error::{Error, Result};
pub use model::{BoundingBox, Detection, GroundTruthInstance, ImageDetections, LabelVocabulary};
