//! Two-stage group-relative policy optimization for a tiny token policy
//! acting in a simulated capture-the-flag environment.

pub mod error;
pub mod grpo;
pub mod policy;
pub mod rewards;
pub mod sim;
pub mod trajectory;
pub mod train;
pub mod vocab;
pub mod walkthrough;

pub use error::{Error, Result};
