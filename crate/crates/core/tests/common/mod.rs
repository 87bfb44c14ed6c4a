//! Checks shared by the test targets and the acceptance runner.

#![allow(dead_code)]

pub mod gradients;
pub mod oracles;
