pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod morph;
pub mod nn;
pub mod segment;
pub mod synthetic;
pub mod train;
