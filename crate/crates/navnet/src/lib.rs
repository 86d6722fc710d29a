//! A differentiable navigation policy for partially observable grid mazes.
//!
//! The crate wires three classical components — a histogram Bayes filter, a
//! K-step value-iteration planner, and a reactive actor — into a single
//! differentiable program whose "model" tensors (transition kernel, reward
//! map, observation likelihood) are learned end-to-end by imitating an exact
//! QMDP expert. Everything that touches the environment also exists in an
//! exact tabular form ([`pomdp`]) so the learned machinery can be verified
//! against ground truth.

pub mod eval;
pub mod gridworld;
pub mod model;
pub mod persist;
pub mod planted;
pub mod pomdp;
pub mod train;
