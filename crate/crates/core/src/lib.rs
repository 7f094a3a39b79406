//! Few-shot image recognition with relative features, learned per-class
//! variances and a category-agnostic prototype transformation.
//!
//! Training runs in two stages. Stage 1 learns a feature extractor and a
//! variance estimator on episodic N-way K-shot tasks, classifying queries by
//! a variance-scaled (Mahalanobis) distance to class prototypes plus a
//! Euclidean distance in a relative-feature space. Stage 2 freezes both and
//! learns a transformation from few-shot class means to prototypes,
//! conditioned on base-class prototypes.

pub mod data;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod metric;
pub mod nets;
pub mod tensor;
pub mod trainer;
pub mod transform;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
