//! Synthetic falling-cube scenes, their file format and evaluation metrics.

pub mod config;
pub mod metrics;
pub mod oracle;
pub mod trajectory;

pub use config::SceneConfig;
pub use metrics::{contact_accuracy, in_contact, rollout_mse};
pub use oracle::{generate_scene, simulate, spawn_bodies, Body};
pub use trajectory::Trajectory;
