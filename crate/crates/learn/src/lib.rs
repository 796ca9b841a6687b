//! Learning stack: dense networks, soft actor-critic, and the staged curriculum
//! trainer with parallel experience collection.

pub mod nn;
pub mod sac;
pub mod curriculum;
