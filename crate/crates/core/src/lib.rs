//! Desk-scale racing simulator used to train and evaluate overtaking policies.
//!
//! The crate is organised bottom-up:
//!
//! * [`track`] closed centerlines, course progress and curvature lookahead
//! * [`vehicle`] kinematic bicycle plant and the rule-based opponent driver
//! * [`sensing`] lidar, the 96-wide observation vector and its normalization
//! * [`reward`] racing and overtaking rewards
//! * [`env`] multi-car episodes, collisions and per-step traces

pub mod env;
pub mod error;
pub mod geom;
pub mod reward;
pub mod sensing;
pub mod track;
pub mod vehicle;

pub use error::{Result, SimError};
