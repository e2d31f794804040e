//! Attention computed as compositions of log-sums of exponentials.
//!
//! Similarity between a query and a key is `log(exp(q) . exp(k))`, so softmax
//! attention factors through a fixed-size summary of the context. This crate
//! provides three equivalent forms of that computation: a quadratic reference
//! ([`attention_quadratic_reference`]), parallel log-space kernels
//! ([`attention_logspace_noncausal`], [`attention_logspace_causal`]), and a
//! constant-memory recurrent state ([`StreamState`]). Values enter as `log V`
//! and results leave as `log A = log S - log Z`.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod logspace;
pub mod streaming;

pub use error::{Error, Result};
pub use gradcheck::{backward_logspace_noncausal, finite_difference_oracle, AttentionGradients};
pub use kernels::{
    attention_logspace_causal, attention_logspace_noncausal, attention_quadratic_reference, softmax_weights,
    AttentionInputs, LogAttentionOutput,
};
pub use logspace::{lcse_over_axis, logadd, lse, lse_over_axis, Axis, LogReal, Matrix, NEG_INF};
pub use streaming::{chunked_causal, chunked_state, stream_causal, StepOutput, StreamState};
