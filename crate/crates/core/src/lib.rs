//! Progressive-subnetwork training lab: gated residual networks, stage
//! schedules, layer-dropping and stacking trainers, and the numerical probes
//! used to study them.

pub mod boolpoly;
pub mod error;
pub mod netcore;
pub mod numkit;
pub mod runner;
pub mod sharedbase;
pub mod sinelab;
pub mod stability;
pub mod subnet;
pub mod trainers;

pub use error::{LabError, Result};
