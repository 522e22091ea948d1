//! Command-line companion to the core crate: synthetic scene generation,
//! configuration, file formats (OBJ, PLY, PNG, CSV, float binaries,
//! checkpoints), training/benchmark orchestration, and the `shellnerf`
//! binary itself.

pub mod bench;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod scene;
