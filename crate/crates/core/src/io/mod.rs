//! File formats: the binary container and what is stored in it.

pub mod checkpoint;
pub mod container;
pub mod dataset;
pub mod metrics;

pub use container::{Container, Payload, Section};
