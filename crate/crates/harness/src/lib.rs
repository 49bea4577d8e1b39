//! Experiment runner for the DMA controller model.

pub mod checks;
pub mod config;
pub mod experiments;
pub mod plot;
