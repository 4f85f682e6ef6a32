//! Identification of sparse linear dynamic networks with a stable spline
//! horseshoe prior.
//!
//! A network node is modeled as a sum of p convolutions plus Gaussian noise:
//! each module k is an unknown FIR vector θₖ driven by a measured input.
//! Most modules are expected to be null. Each θₖ gets a Gaussian prior with
//! covariance τ²λₖ²K, where K is the first-order stable spline kernel
//! (smooth exponential decay), τ is a global shrinkage scale and λₖ a local
//! one, both half-Cauchy. A Gibbs sampler — with one eigendecomposition per
//! module precomputed before the chain — returns the joint posterior in
//! sampled form, detecting which modules are active while regularizing the
//! active ones. The kernel decay rate α can be selected on a grid by
//! optimized marginal likelihood.
//!
//! Entry points:
//! - [`kernel::StableSplineKernel`]: the prior covariance and its factor.
//! - [`netsim::synthesize_dataset`]: synthetic benchmark networks.
//! - [`gibbs::run_chain`] / [`gibbs::summarize_posterior`]: posterior
//!   sampling and module estimates.
//! - [`evidence::select_alpha`]: evidence-based kernel tuning.
//! - [`harness`]: file formats, experiment orchestration and the CLI
//!   building blocks (see the `sshnet` binary and `examples/`).

pub mod distributions;
pub mod error;
pub mod evidence;
pub mod gibbs;
pub mod harness;
pub mod kernel;
pub mod netsim;
pub mod regressors;

pub use error::{Error, Result};
