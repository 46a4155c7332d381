//! Warehouse multi-agent pickup-and-delivery toolkit: grid-map analysis,
//! a lifelong delivery simulator, a prioritized space-time expert planner,
//! a transformer sequence policy with its training loop, and an evaluation
//! harness.

pub mod autodiff;
pub mod env;
pub mod eval;
pub mod expert;
pub mod map;
pub mod obs;
pub mod policy;
pub mod trainer;
