//! Distributed scenario-based stochastic model predictive control.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: uncertain linear systems, partitioning into coupled agents, simulation.
//! * [`scenario`]: sample-size certificates, budget splitting, reliability levels and
//!   seeded scenario generation.
//! * [`qp`]: a dense operator-splitting QP solver used by every program builder.
//! * [`program`]: condensed predictions and the QP instances for centralized, local,
//!   projection and robust (box-tightened) scenario programs.
//! * [`exchange`]: the ADMM scenario exchange between neighbouring agents.
//! * [`softcomm`]: reliability-certified boxes and constraint tightening.
//! * [`mpc`]: receding-horizon drivers and plug-and-play network changes.
//! * [`validation`]: Monte Carlo violation estimates and mode comparison.
//! * [`casestudy`]: the three-room building preset.

pub mod casestudy;
pub mod error;
pub mod exchange;
pub mod model;
pub mod mpc;
pub mod program;
pub mod qp;
pub mod scenario;
pub mod softcomm;
pub mod validation;

pub use error::{Error, Result};
