//! Command-line driver and HTTP service for the federation kernel.

pub mod http;
pub mod tools;
