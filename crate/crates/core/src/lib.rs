//! Bi-level unbalanced optimal transport (BUOT) for partial domain adaptation.

pub mod error;
pub mod bilevel;
pub mod cli;
pub mod config;
pub mod ot;
pub mod model;
pub mod recovery;
pub mod sim;

pub use error::{Error, Result};
