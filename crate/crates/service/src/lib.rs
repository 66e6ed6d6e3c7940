//! HTTP service and command-line front end for the anomaly toolkit.

pub mod api;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;

pub use api::router;
pub use config::ServiceConfig;
pub use engine::Engine;
