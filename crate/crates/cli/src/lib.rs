//! Command-line pipeline around `contstim-core`: configuration, the
//! resumable stage runner and its manifest, and the chain-versus-PLL
//! follow-up.

pub mod config;
pub mod followup;
pub mod manifest;
pub mod pipeline;
pub mod stages;
