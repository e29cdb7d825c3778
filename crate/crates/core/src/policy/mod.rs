//! Encoder, decoder and per-joint action heads, plus the two baselines:
//! temporal cross-attention in place of STA, and STA without history.
//!
//! [`Policy::forward_trajectory`] runs a whole trajectory in one causal pass;
//! [`PolicySession`] produces the same actions one step at a time from
//! cached projections.

mod config;
mod model;
mod params;
mod session;

pub use config::{PolicyConfig, Variant, BIT_PLANES};
pub(crate) use model::Graph;
pub use model::{Policy, StateTokens, StepInput};
pub use params::ParamStore;
pub use session::{AttentionTrace, PolicySession, StepOutput};
