//! Critic-free multi-agent policy optimization over heterogeneous rollout
//! groups, with a synthetic retrieval pipeline to train on and a MAPPO
//! baseline for comparison.
//!
//! A single linear-softmax policy plays every agent of a chain. Rollouts
//! fork at a chosen agent, final answers are scored, rewards flow back along
//! each trajectory and advantages are normalized within groups keyed by
//! question and agent.

pub mod advantage;
pub mod baseline;
pub mod env;
pub mod error;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod rollout;
pub mod run;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{AgentId, GroupKey, MasTopology, RolloutPair, Token, Trajectory};
