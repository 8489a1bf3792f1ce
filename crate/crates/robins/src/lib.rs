//! Solver and verifier toolkit for a zero-sum stochastic differential game
//! between an insurer choosing investment and retained-risk exposure and an
//! adversary distorting the model within a penalized family of equivalent
//! measures. Supports insider information carried by an enlarged filtration:
//! the insurer may observe a terminal functional of the asset or surplus
//! driver (a Brownian integral) or the future claim count.
//!
//! The crate is organized in layers:
//!
//! * [`scenario`] declares and validates model inputs (market, insurance,
//!   insider, ambiguity) loaded from sectioned config files.
//! * [`enlargement`] provides the information drift and compensator tilt
//!   induced by the insider signal, plus the conditional density kernel.
//! * [`closedform`] evaluates explicit saddle strategies and game values in
//!   the regimes where they are available.
//! * [`simulate`] runs exact log-space Monte Carlo for wealth and density
//!   under the enlarged filtration and estimates the game functional.
//! * [`oracle`] verifies optimality without using the closed forms: grid
//!   saddle search, directional derivative checks, martingale diagnostics.
//! * [`bsde`] solves the wealth equation via its conditional-expectation
//!   representation and the value equation via a regression scheme with
//!   shooting on the terminal constant.
//! * [`cli`] wires everything into subcommands with stable file outputs.

pub mod bsde;
pub mod cli;
pub mod closedform;
pub mod curves;
pub mod enlargement;
pub mod error;
pub mod numerics;
pub mod oracle;
pub mod rng;
pub mod scenario;
pub mod simulate;
pub mod strategy;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
