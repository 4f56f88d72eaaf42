//! Reconstruction of nonlinear dynamical systems from multimodal time series.
//!
//! The crate trains a piecewise-linear recurrent latent model jointly with a
//! multimodal variational encoder using a sparse teacher-forcing signal, and
//! evaluates reconstructions with geometric, spectral, and chaos-theoretic
//! measures. Modules:
//!
//! - [`diff`] — reverse-mode gradient engine over dense arrays
//! - [`dynamics`] — the piecewise-linear latent model and its Jacobians
//! - [`obs`] — per-modality observation models (decoders)
//! - [`encode`] — approximate-posterior encoders (CNN, mixture, RNN, MLP)
//! - [`train`] — loss assembly, optimizer loop, initialization
//! - [`baselines`] — multiple shooting, truncated-BPTT, Gaussianization
//! - [`datagen`] — synthetic systems, observation sampling, dataset files
//! - [`metrics`] — reconstruction-quality measures
//! - [`checkpoint`] — binary model container
//! - [`config`] — experiment configuration files

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod diff;
pub mod dynamics;
pub mod encode;
pub mod metrics;
pub mod obs;
pub mod rng;
pub mod series;
pub mod train;

mod linalg;

pub use diff::{Array, DiffError, Tape};
