//! Intervention consistency auditing for decision models.
//!
//! A decision model is shown two versions of the same scenario that differ
//! only in a decision-irrelevant feature (a name, a credential, a framing).
//! If the decision changes, the model relies on that feature. This crate
//! builds the paired scenarios, drives the models, parses their answers,
//! measures flip rates with the usual statistical battery, and supports a
//! structured extract-then-score pipeline together with a loop that
//! localizes and patches leaking extraction fields.

pub mod audit_loop;
pub mod domain;
pub mod error;
pub mod gateway;
pub mod hashing;
pub mod interventions;
pub mod jsonl;
pub mod parsing;
pub mod report;
pub mod rubric;
pub mod run;
pub mod shipped;
pub mod stats;
pub mod validator;
pub mod vignette;

pub use domain::{BiasType, Domain};
pub use error::{Error, Result};
