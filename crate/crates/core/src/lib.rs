//! Allocation-only core of evoloop: the unified action space, a simulated
//! desktop, policies with token log-probabilities, and the training-signal
//! math for experience curation and policy optimization.

#![cfg_attr(not(test), no_std)]
extern crate alloc;

pub mod action;
pub mod coldstart;
pub mod episode;
pub mod digest;
pub mod error;
pub mod math;
pub mod model;
pub mod policy;
pub mod preference;
pub mod rft;
pub mod sandbox;
pub mod stepo;
pub mod synthesis;

pub use action::{parse_action, serialize_action, validate_sequence, Action, ActionKind, Point, TerminateStatus};
pub use digest::StateHash;
pub use error::{Error, Result};
