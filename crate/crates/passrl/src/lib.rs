//! Learning compiler pass-ordering policies with deep Q-learning.
//!
//! The crate trains an agent that looks only at a static encoding of a
//! program's intermediate representation plus its own action history,
//! picks optimization actions at one of three abstraction levels
//! (pass sub-sequences, single passes, or passes with explicit parameter
//! values), and is rewarded with the log-speedup measured by benchmarking
//! the optimized result. Training uses a replay memory and a periodically
//! synchronized target network; benchmarking can be farmed out to worker
//! processes over a small wire protocol, and every measured transition is
//! cached in a durable store so later runs replay it instead of
//! re-benchmarking.
//!
//! Entry points:
//! - [`action::ActionSpace`] builds the H/M/L action catalogs from data files.
//! - [`env::Environment`] applies decoded actions through a [`env::Backend`]
//!   (an external optimizer toolchain or the deterministic synthetic model).
//! - [`agent::Learner`] owns the residual Q-network and its training loop.
//! - [`orchestrator`] wires dataset split, batched exploration, dispatch,
//!   training, and periodic greedy evaluation together.
//! - [`cli`] exposes the `train`, `optimize`, `evaluate`, `report`, `worker`
//!   and `store verify` subcommands used by the `passrl` binary.
//!
//! The `examples/` directory of this crate has one runnable program per
//! major capability; start with `synthetic_training`.

pub mod action;
pub mod agent;
pub mod cli;
pub mod config;
pub mod encode;
pub mod env;
pub mod orchestrator;
pub mod protocol;
pub mod replay;
pub mod report;
pub mod state;
pub mod store;
pub mod worker;

pub use action::{ActionLevel, ActionSpace, Invocation};
pub use agent::{Learner, QNetwork, TrainConfig};
pub use encode::{HistogramEncoder, OpcodeVocab, StateEncoder};
pub use env::{Backend, BenchmarkPolicy, Environment, SyntheticBackend};
pub use replay::ReplayMemory;
pub use state::{ActionHistory, AgentState, Experience, IrArtifact, TransitionRecord};
pub use store::Store;
