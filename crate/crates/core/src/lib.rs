//! Threshold watermarking for federated learning.

pub mod field;
pub mod par;
pub mod seed;
pub mod sharing;
pub mod secagg;
pub mod setup;
pub mod flsim;
pub mod protocol;
pub mod verify;
pub mod attacks;
pub mod experiments;
