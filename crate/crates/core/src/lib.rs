//! Federated learning simulator for personalized split models with
//! prototype-guided head adaptation.

pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod personalization;
pub mod protocol;
pub mod prototypes;
pub mod rng;
pub mod scheduler;
pub mod split;
pub mod strategy;
pub mod tensor;

pub use error::{Error, Result};
