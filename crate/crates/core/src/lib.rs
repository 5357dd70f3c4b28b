//! Numerical testbed for regularisation-based continual learning.
//!
//! The crate implements Online EWC, Synaptic Intelligence and Memory Aware
//! Synapses on a small feed-forward classifier, trained over synthetic
//! subject-incremental task streams, together with the diagnostic probes that
//! test how each importance heuristic reacts to gradient noise, covariate shift
//! between subjects and accumulated importance.
//!
//! Module map:
//!
//! * [`tensor`]: parameter vectors, the MLP classifier and its exact gradients.
//! * [`optim`]: SGD and Adam, each returning a [`optim::StepRecord`].
//! * [`strategies`]: Naive, Online EWC, SI and MAS.
//! * [`metrics`]: accuracy matrix, ACC/BWT/FWT and macro F1.
//! * [`stream`]: the synthetic subject stream generator.
//! * [`signal`]: notch / Butterworth filters, kurtosis rejection, windowing.
//! * [`stats`]: Pearson correlation and one-sample t-tests.
//! * [`diagnostics`]: the Fisher, path-integral, interference and accumulation probes.
//! * [`runner`]: experiment configuration, training loop, sweeps and reports.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod signal;
pub mod stats;
pub mod strategies;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
