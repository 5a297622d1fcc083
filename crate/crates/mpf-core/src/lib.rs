//! Desk-scale engine for multi-path feedback recurrent networks.
//!
//! A recurrent scene-parsing network is unrolled into a static feedforward
//! DAG: selected hidden layers merge their linear outputs with transformed
//! copies of the previous step's top-layer output, trunk weights are shared
//! across steps, and the per-step top outputs are fused by fixed weights
//! before a deconvolution classifier. Training runs reverse-mode
//! differentiation over the unrolled graph with SGD plus momentum, weighted
//! per-pixel cross entropy, and deterministic seeded augmentation.
//!
//! The crate also ships the verification tooling the design leans on:
//! finite-difference gradient checking, receptive-field analysis (exact
//! dependency cones and measured gradient support), segmentation metrics,
//! and a synthetic context-dependent segmentation task whose labels are
//! unresolvable from local patches alone.

pub mod analyzer;
pub mod arch;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pnm;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{LabelMap, Precision, Shape, Tensor, VOID_LABEL};
