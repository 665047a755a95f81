//! Files on disk: features, manifests, configuration, checkpoints, and the
//! synthetic corpus generator.

pub mod checkpoint;
pub mod config;
pub mod format;
pub mod manifest;
pub mod synth;
