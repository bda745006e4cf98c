//! Recovering a static object arrangement and world-space human motion from
//! monocular joint tracks by fitting short human-object interaction clips
//! ("scenelets") under explicit occlusion reasoning.

pub mod confidence;
pub mod db;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod io;
pub mod optim;
pub mod pipeline;
pub mod skeleton;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
