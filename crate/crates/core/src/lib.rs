//! Curriculum-aware multi-task reinforcement learning on small grid worlds.

pub mod cli;
pub mod error;
pub mod numcore;
pub mod ranking;
pub mod scheduler;
pub mod solver;
pub mod tasks;
pub mod transfer;

pub use error::{CamrlError, Result};
