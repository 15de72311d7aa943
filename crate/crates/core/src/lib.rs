//! Advisor models: small policies trained with GRPO to write per-instance
//! advice for frozen black-box students.
//!
//! The crate is organised bottom-up: [`types`] and [`rng`] hold shared data
//! and randomness, [`policy`] is the advisor network, [`grpo`] trains it,
//! [`environments`] and [`students`] simulate the world it acts in,
//! [`orchestrator`] wires rollouts into training and evaluation, and
//! [`evalharness`] runs the comparative experiments. [`config`],
//! [`checkpoint`], [`metrics`] and [`commands`] back the `advisor` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod environments;
pub mod evalharness;
pub mod grpo;
pub mod metrics;
pub mod orchestrator;
pub mod policy;
pub mod rng;
pub mod students;
pub mod types;
