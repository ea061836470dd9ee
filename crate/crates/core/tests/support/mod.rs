//! Test oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod audit;
pub mod bruteforce;
pub mod fingerprint;
pub mod gradcheck;
