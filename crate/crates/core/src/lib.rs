//! Continuous fundus-image quality grading on the 1 to 10 half-step scale.

pub mod cli;
pub mod datasets;
pub mod explain;
pub mod imaging;
pub mod metrics;
pub mod qmodel;
pub mod scale;
pub mod service;
pub mod training;
