//! Seeded test and benchmark harness around `logattn-core`.

pub mod bench;
pub mod check;
pub mod config;
pub mod demo;
pub mod error;

pub use config::{Form, RunConfig};
pub use error::HarnessError;
