//! Oracle comparisons shared by these tests and the acceptance suite. Each
//! check panics on the first disagreement and otherwise returns a summary.
#![allow(dead_code)]

pub mod gradients;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod targets;
