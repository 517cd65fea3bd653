//! HTTP API and command-line front end for the feedback analytics engine.

pub mod app;
pub mod cli;
pub mod config;
pub mod http;
pub mod jobs;

pub use app::{App, AppError, SessionHandle, SessionStatus};
pub use config::Config;
