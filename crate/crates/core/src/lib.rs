//! Three-stage WiFi-to-caption pipeline over a synthetic CSI corpus.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod student;
pub mod synth;
pub mod teacher;
pub mod tensorio;

pub use error::{Error, Result};
