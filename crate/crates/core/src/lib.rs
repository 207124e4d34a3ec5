//! Federated class-incremental learning simulator.
//!
//! A frozen random backbone is adapted per stage by low-rank adapters whose
//! factors are merged by summation; classes are represented by prototypes
//! aggregated on the server with a distance-based re-weighting.

mod codec;

pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod lora;
pub mod numkit;
pub mod optim;
pub mod protomodel;

pub use error::{Error, Result};

/// Class label.
pub type ClassId = u32;
