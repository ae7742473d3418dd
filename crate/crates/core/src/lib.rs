//! Information diffusion in directed networks of discrete-choice agents.
//!
//! The crate couples three views of the same process:
//!
//! - [`abm`]: a stochastic agent-based simulator where one edge fires per
//!   step and the listening agent re-draws its state from a transition
//!   kernel evaluated on its full in-neighborhood;
//! - [`mfd`]: the mean-field ODE over per-in-degree state distributions,
//!   driven by neighbor compositions drawn from the edge-source law;
//! - [`twostate`]: the scalar fixed-point map for the truthful /
//!   hallucinating reduction, with contraction and comparative-statics
//!   diagnostics.
//!
//! Kernels come from [`rum`] (multinomial logit with Gumbel utilities, or a
//! smoothed plug-in table), and [`metrics`] compares simulated and predicted
//! trajectories. [`recipe`] and [`cli`] wire everything into reproducible
//! experiment runs.

// `!(x >= 0.0)` rejects NaN along with negatives
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abm;
pub mod cli;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod metrics;
pub mod mfd;
pub mod recipe;
pub mod rum;
pub mod trajectory;
pub mod twostate;

pub use error::{Error, Result};
pub use graph::{DirectedGraph, GraphGenSpec, GraphModel, JointDegreeDistribution};
pub use kernel::{Kernel, TransitionKernel};
pub use rum::{ChoiceModel, Feature, FeatureMapSpec, StateSpace, TransitionRecord};
pub use trajectory::Trajectory;
pub use twostate::{AffineLogit, PhiContext, TwoStateLogits};
