//! Command line tools, configuration and the HTTP query service.
//!
//! The service holds immutable galleries in memory and answers retrieval and
//! counterfactual requests for the explorer and scripted clients. Request and
//! response schemas are documented in `docs/api.md`.

pub mod api;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod report;
pub mod thumbs;
pub mod workspace;

pub use config::ServiceConfig;
pub use engine::Engine;
pub use error::{Result, ServiceError};
