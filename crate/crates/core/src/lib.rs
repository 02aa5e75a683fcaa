//! Flexibility scheduling in multi-carrier integrated energy systems
//! (electricity, heat, hydrogen, fuels) under three interchangeable
//! coordination mechanisms — centralized co-optimization, iterative
//! price-response, and rolling market-auction coupling — with a common
//! dispatch-result shape for comparing cost, prices, and runtime
//! scaling.

// Hour-indexed numeric code reads best with explicit range loops.
#![allow(clippy::needless_range_loop)]

pub mod admm;
pub mod agents;
pub mod auction;
pub mod bench;
pub mod coopt;
pub mod dispatch;
pub mod qp;
pub mod runtime;
pub mod scenario;
