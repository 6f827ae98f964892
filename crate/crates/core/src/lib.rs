//! Meta-learning over families of related tasks.
//!
//! A model initialization is trained so that a few meta-gradient steps on a
//! handful of tasks from an unseen family, followed by a few gradient steps
//! on one goal task from that family, give a good fit. The outer gradient
//! runs through both adaptation levels, which needs third-order derivatives;
//! [`autodiff`] provides them.

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod meta;
pub mod model;
pub mod tasks;

pub use error::{Error, Result};
