//! Synthetic object-on-background patch generation, adversarial refinement
//! and domain-gap measurement for satellite-style imagery.
//!
//! The pipeline has three stages:
//!
//! 1. [`imageops`] keys, rotates and composites object sprites onto
//!    background patches to build a synthetic set `X`.
//! 2. [`trainer`] trains a residual refiner `R` against a patch
//!    discriminator `D` ([`nets`], built on the tape in [`autodiff`]) so that
//!    `R(x)` looks like the real set `Y` while staying close to `x`.
//! 3. [`features`], [`metrics`] and [`tsne`] measure how far apart `X`,
//!    `R(X)` and `Y` are.
//!
//! [`cli`] wires the stages together behind the `sat-refine` binary and
//! [`toy`] provides a small deterministic stand-in dataset.

pub mod autodiff;
pub mod cli;
pub mod features;
pub mod imageops;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod toy;
pub mod trainer;
pub mod tsne;

pub use autodiff::{Graph, Real, Tensor, Var};
pub use imageops::{ImagePatch, PlacementSpec, Sprite};
pub use metrics::{KernelSpec, MmdEstimate, SampleMatrix};
pub use nets::{Checkpoint, DiscriminatorNet, Model, RefinerNet};


