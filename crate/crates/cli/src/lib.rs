//! Command-line pipeline stages and the HTTP embedding service.

pub mod commands;
pub mod exit;
pub mod output;
pub mod service;
