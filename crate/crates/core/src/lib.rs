//! Hybrid image representations for scene recognition and domain adaptation.
//!
//! An image is encoded as the concatenation of a mid-level local
//! representation (LLC codes of dense region features over a part
//! dictionary), convolutional Fisher vectors and global fully-connected
//! features, then classified with a one-vs-rest linear SVM.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cfv;
pub mod classify;
pub mod coding;
pub mod datamodel;
pub mod dictionary;
pub mod error;
pub mod extractors;
pub mod gmm;
pub mod mlr;
pub mod pipeline;
pub mod proposals;
pub mod seed;
pub mod synth;

pub use datamodel::{
    BBox, Block, DatasetManifest, FeatureStore, FeatureTensor, FeatureVec, HybridRepresentation, ImageRecord, Matrix,
    Split,
};
pub use error::{Error, Result};
