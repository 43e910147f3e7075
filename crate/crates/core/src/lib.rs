//! Multi-level image-text alignment on synthetic data.

pub mod category_cl;
pub mod divergence;
pub mod encoders;
pub mod error;
pub mod global_ita;
pub mod harness;
pub mod knowledge;
pub mod local_ita;
pub mod numerics;
pub mod params;
pub mod proxy;
pub mod verify;

pub use error::{MlipError, Result};
