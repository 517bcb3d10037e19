//! Expressive text-to-speech training and synthesis at desk scale.

pub mod acoustic;
pub mod adversarial;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod schedule;
pub mod selfcheck;
pub mod signal;
pub mod train;
pub mod verify;
pub mod vocoder;

pub use error::{Error, Result};
