//! Discrete-event simulation of a serverless LLM serving control plane.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoscaler;
pub mod cluster;
pub mod config;
pub mod distflow;
pub mod dsched;
pub mod engine;
pub mod experiments;
pub mod metrics;
pub mod radix;
pub mod rtc;
pub mod simkernel;
pub mod workload;
