//! Learning input-state feedback linearizations of single-input
//! control-affine plants from sampled trajectories.

pub mod diffcore;
pub mod plants;
pub mod excite;
pub mod flmodel;
pub mod trainer;
pub mod analytic;
pub mod evalharness;
