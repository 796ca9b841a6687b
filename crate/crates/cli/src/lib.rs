//! Evaluation, trace export, oracle self-checks and the command-line front end.

pub mod cli;
pub mod eval;
pub mod selftest;
pub mod trace;
