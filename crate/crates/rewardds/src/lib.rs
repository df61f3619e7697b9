//! Reward-guided synthetic data pipeline with differentially private
//! proxy training, built around a desk-scale character-level model so
//! every training, filtering, refinement, and attack step is exactly
//! testable.

pub mod data;
pub mod dptrain;
pub mod evalkit;
pub mod exec;
pub mod pipeline;
pub mod reward;
pub mod runner;
pub mod rng;
pub mod tinylm;
