//! Source-free domain adaptation with an assistant domain module.
//!
//! A small attention backbone is trained on labeled source data together with
//! an assistant convolutional head over its aggregated attention map. On the
//! unlabeled target, pseudo-labels from the two feature spaces are compared:
//! agreeing samples form an easy bank, the rest are relabeled by nearest easy
//! neighbours, and the backbone is adapted with information maximization,
//! consistency cross-entropy and a class-conditional multi-kernel MMD.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod consistency;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod pseudolabel;
pub mod synthdata;

pub use error::{CoreError, Result};
