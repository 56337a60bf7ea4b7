//! Traffic-signal-control lab: a deterministic intersection simulator, a set
//! of signal controllers (cyclic, pressure-based, LLM-backed), a small value
//! critic trained on switch-level transitions, and the data plumbing needed to
//! turn controller reasoning into fine-tuning datasets.
//!
//! Layering, bottom up:
//!
//! * [`netmodel`]  road networks, signal phases, traffic flows
//! * [`simcore`]   per-second discrete simulation and episode runner
//! * [`observe`]   queue / approaching-vehicle observations per intersection
//! * [`prompting`] observation -> prompt text -> parsed decision
//! * [`agents`]    the `Controller` trait and its implementations
//! * [`llmclient`] chat-completion backends (HTTP, stub, replay) + transcripts
//! * [`critic`]    action-value MLP, TD training, trajectory filtering
//! * [`finetune`]  imitation / ranking losses and dataset export
//! * [`metrics`]   travel-time, queue-length and wait-time evaluation
//!
//! Numeric kernels (critic and fine-tuning losses) are generic over the
//! scalar type through [`scalar::Scalar`]; the simulator itself is fixed to
//! `f64` because its outputs are serialized and compared bit-for-bit.

pub mod scalar;

pub mod netmodel;
pub mod simcore;

pub mod observe;
pub mod prompting;
pub mod llmclient;
pub mod metrics;
pub mod finetune;
pub mod critic;
pub mod agents;

/// Default-precision aliases for the scalar-generic kernels. Everything the
/// binary and the simulator exchange with them runs at `f64`.
pub type Critic = critic::CriticNet<f64>;
pub type CriticTrainer = critic::Trainer<f64>;
pub type CriticTransition = critic::Transition<f64>;
pub type RankingBatch = finetune::RankingBatch<f64>;
pub type TokenLogProbs = finetune::TokenLogProbs<f64>;
