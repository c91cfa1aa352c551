pub mod control;
pub mod cooptimizer;
pub mod domain;
pub mod dp;
pub mod error;
pub mod freqmodel;
pub mod robustfcr;
pub mod scenarios;
pub mod sim;
pub mod socp;

pub use error::{Error, Result};
