//! Closed-loop simplified refined instrumental variable (CLSRIVC) estimation
//! of continuous-time transfer functions from sampled data, together with an
//! exact sampled-data closed-loop simulator and tools that quantify the
//! estimator's asymptotic bias under a continuous-time controller.

pub mod error;
pub mod lti;
pub mod poly;
pub mod signals;
pub mod sim;
pub mod estimator;
pub mod analysis;
pub mod experiment;

pub use error::{Assumption, Error, Result};
