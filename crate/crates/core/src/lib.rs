//! Rollouts for agents that reason over images with zoom-in and rotate tools,
//! with trajectory-level rewards, group-relative advantages, training-data
//! curation and a small synthetic environment for reward ablations.

pub mod curation;
pub mod dataset;
pub mod grpo;
pub mod policy;
pub mod protocol;
pub mod remote;
pub mod reward;
pub mod rollout;
pub mod toolbox;
pub mod toyrl;
pub mod trajectory;
