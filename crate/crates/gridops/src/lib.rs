//! Operations suite for a regional grid: persistent store, HTTP API, TLS
//! front end, probe scheduler and the `gridops` command line.

pub mod api;
pub mod auth;
pub mod cli;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod formats;
pub mod scheduler;
pub mod store;
pub mod suite;
pub mod tls;

pub use error::SuiteError;
pub use suite::Suite;
