//! Desk-scale laboratory for studying how fine-tuning strategies trade
//! adversarial/OOD robustness against accuracy.
//!
//! The crate hosts a small reverse-mode autodiff engine, a toy vision
//! transformer with seven attachable fine-tuning strategies, an L-infinity
//! PGD attack, a Gaussian feature model with closed-form accuracy oracles,
//! synthetic task generation with parametric domain shifts, a step-level
//! robustness tracking loop, and Pareto-frontier/AUC trade-off analysis.

pub mod analysis;
pub mod attack;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod peft;
pub mod rng;
pub mod theory;
pub mod tracking;

pub use error::{Error, Result};
