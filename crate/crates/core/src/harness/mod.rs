//! Data generation, configuration, the joint model, training and evaluation.

pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod train;
