//! Rubric-driven grading of free-text answers.
//!
//! A [`rubric::Rubric`] is contextualized into a rubric knowledge tree whose
//! leaves are atomic rules ([`rkt`]). Answers are graded by classifying each
//! leaf through the [`gateway`], then scores and reasons cascade back up the
//! tree ([`scoring`], [`report`]). [`eval`] holds the batch metrics.

pub mod eval;
pub mod gateway;
mod hash;
pub mod report;
pub mod rkt;
pub mod rubric;
pub mod scoring;
pub mod text;

pub use hash::{digest_hex, json_digest};
