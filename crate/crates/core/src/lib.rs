//! Goal-conditioned visuomotor control at desk scale.
//!
//! The crate implements a complete closed-loop pipeline:
//!
//! * [`tensor`] / [`graph`] / [`optim`] — a small f32 tensor library with
//!   reverse-mode automatic differentiation and a bias-corrected Adam
//!   optimizer, checked against central finite differences.
//! * [`world`] — a deterministic 2D tabletop simulator rendered to 32x32 RGB,
//!   a scripted expert, and episode dataset generation.
//! * [`perturb`] — five test-time image corruptions (shift, rotation, color
//!   jitter, occlusion, noise patches) applied to observations only.
//! * [`codec`] — a two-stage video compressor: a spatial VAE followed by a
//!   causal temporal compressor.
//! * [`planner`] — a masked latent-video generator trained with rectified
//!   flow; produces goal-image sequences from recent history and an
//!   instruction id.
//! * [`align`] — prototype-based contrastive alignment of current and goal
//!   embeddings with Sinkhorn-Knopp target assignments.
//! * [`policy`] — a goal-conditioned DDPM action head trained jointly with
//!   the alignment objective.
//! * [`runtime`] — the closed-loop executor, chain evaluator, and ablation
//!   sweeps.
//! * [`config`] / [`report`] — run configuration with strict key checking,
//!   and deterministic CSV/JSON report emission.
//!
//! Everything is seeded through [`rng::StreamRng`]; a run with the same
//! configuration and seed reproduces its reports byte for byte.

pub mod align;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod perturb;
pub mod planner;
pub mod policy;
pub mod rectified_flow;
pub mod report;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod world;

pub use error::CoreError;
pub use graph::{Graph, Var};
pub use rng::StreamRng;
pub use tensor::Tensor;
