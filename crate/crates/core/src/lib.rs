//! Online test-time correction of a frozen 3D detector with visual prompts.

pub mod detectors;
pub mod engine;
pub mod feedback;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod nnkit;
pub mod oa;
pub mod promptbuffer;
pub mod rng;
pub mod scenesim;
