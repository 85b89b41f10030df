//! Sync-node extended admittance modeling and frequency-domain modal
//! analysis of converter-interlinked ac/dc systems.

pub mod config;
pub mod converter;
pub mod ein;
pub mod error;
pub mod fma;
pub mod linalg;
pub mod lti;
pub mod scanlab;
pub mod system;

pub use error::{Error, Result};
