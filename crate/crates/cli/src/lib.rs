//! Manifest-driven experiment runner.

pub mod expr;
pub mod manifest;
pub mod plot;
pub mod run;
