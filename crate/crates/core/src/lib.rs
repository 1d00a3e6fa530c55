//! Query-conditioned agentic supernet.
//!
//! A layered distribution over agentic operators samples one multi-agent
//! architecture per query, executes it against an environment, and is trained
//! with cost-aware Monte Carlo gradients while operators evolve through
//! textual patches.

pub mod controller;
pub mod embedding;
pub mod executor;
pub mod harness;
pub mod http;
pub mod optimizer;
pub mod registry;
pub mod sampler;
