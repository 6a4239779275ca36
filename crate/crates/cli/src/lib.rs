//! Library half of the `frameguide` binary, split out so the config and
//! command code can be unit tested.

pub mod commands;
pub mod config;
pub mod error;
