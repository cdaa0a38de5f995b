//! Repair-strategy engine for advanced persistent threats on networks whose
//! topology changes over time.
//!
//! The crate couples a node-level mean-field compromise model
//! ([`epidemic`]) with impact accounting ([`impact`]), structural node
//! grading ([`grading`]), a forward-backward optimal-control solver
//! ([`control`]) and a per-slot attacker/defender game ([`game`]).
//! [`scenario`] holds configurations, presets and the end-to-end comparison
//! runs; [`cli`] is the command-line front end.

pub mod cli;
pub mod control;
pub mod epidemic;
pub mod error;
pub mod game;
pub mod grading;
pub mod impact;
pub mod metrics;
pub mod scenario;
pub mod topology;

pub use error::{Error, Result};
