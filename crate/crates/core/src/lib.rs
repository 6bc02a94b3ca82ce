//! Certified lower bounds on the performance of analog-to-digital converters
//! with a fixed output alphabet and error-shaping filter.

pub mod config;
pub mod engine;
pub mod error;
pub mod exact;
pub mod grid;
pub mod invariant;
pub mod model;
pub mod oracle;
pub mod output;
pub mod pipeline;
pub mod search;
pub mod sim;

pub use error::{Error, Result};
