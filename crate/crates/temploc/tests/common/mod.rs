//! Shared helpers for the integration suites. Each test target compiles its
//! own copy, so not every helper is used everywhere.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
