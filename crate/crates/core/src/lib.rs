//! Temporal disentanglement (TED) as an auxiliary loss for a value-based
//! agent, on synthetic environments whose ground-truth factors are known.
//!
//! The observation model lives in [`synthgen`], the control task in
//! [`envsim`], the network engine in [`nncore`], episode-tagged replay and
//! pair sampling in [`replay`], the classifier and loss in [`tedloss`], the
//! surrogate agent in [`agent`], the fixed-factor score in [`dismetric`] and
//! experiment orchestration in [`harness`].

pub mod agent;
pub mod dismetric;
pub mod envsim;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod nncore;
pub mod replay;
pub mod synthgen;
pub mod tedloss;

pub use error::{ErrorCategory, Result, TedError};
