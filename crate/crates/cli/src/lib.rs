//! Experiment harness around the `verfedsv` library: TOML configuration,
//! training and valuation commands, and the desk-scale presets.

pub mod config;
pub mod pipeline;
pub mod presets;
