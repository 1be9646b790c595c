//! File formats, experiment drivers and the command-line front end for
//! [`arapdepth_core`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod manifest;
pub mod table;

pub use error::{AppError, AppResult};
