//! Desk-scale workbench for studying backdoor data poisoning in image
//! classifiers: attacks, post-training defenses (model repair and backdoor
//! detection), and the security games that measure the robustness and
//! detectability of an attack.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod detect;
pub mod error;
pub mod exec;
pub mod game;
pub mod image;
pub mod metrics;
pub mod model;
pub mod presets;
pub mod repair;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
