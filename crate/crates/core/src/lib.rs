//! Discrete-event simulator of a worker node's container image pull path.

// Negated float comparisons reject NaN inputs along with out-of-range ones.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod calibrate;
pub mod control;
pub mod engine;
pub mod error;
pub mod gc;
pub mod imageset;
pub mod magi;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod runtime;
pub mod scenario;
pub mod sim;
