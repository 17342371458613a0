//! Service layer: configuration, session store, HTTP API and CLI.

pub mod cli;
pub mod config;
pub mod schemas;
pub mod server;
pub mod session;
pub mod store;
