//! Desk-scale laboratory for data-free model extraction.
//!
//! A black-box target classifier is reconstructed from query access alone:
//! a generator proposes synthetic inputs, students learn to match the
//! target's answers, and every query is counted. Two extraction methods are
//! provided: a dual-student min-max loop whose generator needs no extra
//! queries, and a forward-differences baseline that buys its generator
//! gradients with oracle calls. Evaluation covers agreement, gradient
//! fidelity, class balance, and transfer attacks.

pub mod attacks;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod harness;
pub mod losses;
pub mod ndgrad;
pub mod nets;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
