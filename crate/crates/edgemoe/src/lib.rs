//! Memory-constrained mixture-of-experts inference toolkit.
//!
//! MoE language models spend most of their bytes on expert FFN weights that are
//! each activated only sporadically, so on small devices the experts are held in
//! storage and swapped into a bounded RAM buffer on demand. This crate provides
//! the offline and online halves of that machinery:
//!
//! * offline: per-channel integer quantization of expert weights ([`quant`]),
//!   a deterministic toy MoE model for measuring accuracy impact ([`toy`]), and
//!   a planner that assigns each expert a bitwidth under a tolerable accuracy
//!   loss ([`planner`]);
//! * online: an activation predictor trained on routing traces ([`predictor`]),
//!   a byte-budgeted expert buffer with pluggable eviction policies ([`buffer`]),
//!   and a discrete-event simulator that overlaps expert I/O with compute to
//!   quantify latency/memory trade-offs ([`sim`]);
//! * synthetic routing-trace generators for experiments ([`tracegen`]).

pub mod buffer;
pub mod error;
pub mod math;
pub mod planner;
pub mod predictor;
pub mod quant;
pub mod sim;
pub mod topology;
pub mod toy;
pub mod tracegen;

pub use error::{Error, Result};
pub use topology::{
    expert_size_bytes, non_expert_size_bytes, ActivationStep, Bitwidth, ExpertRef, MoEConfig,
    Stage, TokenTrace, TraceHeader, TraceSample,
};
pub use toy::QuantPlan;
