// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod error;
pub mod attribution;
pub mod circuits;
pub mod config;
pub mod eval;
pub mod interactions;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod ppr;
pub mod report;
pub mod unlearn;

pub use error::{Error, Result};
