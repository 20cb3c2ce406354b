//! Retrieval-augmented emotion classification under missing modalities.
//!
//! The crate is organised around the three training stages:
//!
//! 1. [`encoder`]: pretrain one encoder per modality on complete labeled data.
//! 2. [`vecstore`]: encode the whole corpus and keep L2-normalized hidden
//!    features per modality, aligned by sample id, for exact top-K search.
//! 3. [`pipeline`]: when modalities are missing, retrieve neighbours through
//!    the available ones, fuse the aligned features of the missing ones and
//!    classify the completed concatenation.
//!
//! [`eval`] holds metrics, cross-validation and report emission; [`registry`]
//! maps strategy names (similarity metrics, slot fillers) to implementations.

pub mod bytes;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod registry;
pub mod vecstore;

pub use error::{RamerError, Result};
