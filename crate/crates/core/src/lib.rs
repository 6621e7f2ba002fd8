pub mod config;
pub mod disturbance;
pub mod dr_cvar;
pub mod error;
pub mod harness;
pub mod mpc;
pub mod qp;
pub mod tube;

pub use error::{Error, Result};
