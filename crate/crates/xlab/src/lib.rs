//! Experiment runner, prediction service and file formats around
//! [`xlab_core`].

pub mod client;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod service;
pub mod trends;

pub use error::{Result, XlabError};
