//! Experiment harness around [`eocd_core`]: configuration files, synthetic
//! and IDX datasets with non-iid partitioning, the multi-seed scheme runner,
//! metrics emission, and the brute-force oracles the acceptance suite
//! checks the closed-form pieces against.

pub mod config;
pub mod data;
pub mod metrics;
pub mod oracle;
pub mod runner;
