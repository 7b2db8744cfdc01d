//! Channel estimation for single-carrier THz extremely-large MIMO links with
//! beam squint, multipath and molecular absorption.

pub mod beamspace;
pub mod config;
pub mod error;
pub mod estimators;
pub mod geometry;
pub mod harness;
pub mod layout;
pub mod model;
pub mod rng;
pub mod signal;
pub mod solvers;

pub use config::{AbsorptionTable, DelaySolver, SystemConfig};
pub use error::{Error, Result};
pub use layout::{CMat, CVec, Layout, C64};
