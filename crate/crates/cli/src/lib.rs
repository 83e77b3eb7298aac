//! Command-line front end: training runs, long-image generation, proxy
//! evaluation and checkpoint inspection.

pub mod commands;
pub mod config;
pub mod proxy;
