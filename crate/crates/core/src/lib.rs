//! Lifelong reinforcement learning with an online mixture of environment
//! models under a Chinese-restaurant-process prior.
//!
//! Each period the learner explores the current environment, decides from
//! the posterior over its cluster library whether the environment is new,
//! refines the per-cluster environment models with EM, and retrieves and
//! trains the policy of the best-matching cluster.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod envmodel;
pub mod envs;
pub mod error;
pub mod harness;
pub mod lifelong;
pub mod mixture;
pub mod numerics;
pub mod policy;
pub mod rng;

pub use envmodel::{EnvModel, ModelMode, WindowedDataset};
pub use envs::{DynamicEnvSequence, EnvType, NavConfig, NavSettings, SequenceMode, Transition};
pub use error::{Error, Result};
pub use harness::ExperimentConfig;
pub use lifelong::{LifelongConfig, LifelongResult, Method, PeriodRecord};
pub use mixture::{ClusterLibrary, EmSettings, MassRule};
pub use numerics::{Architecture, GradientVector, NetworkParams};
pub use policy::{GaussianPolicy, TrainSettings};
