//! Experiment driver around the numerical core: dataset files, experiment
//! configs, training sweeps, ablation tables, and report emission.

pub mod config;
pub mod io;
pub mod runner;
