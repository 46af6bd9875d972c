//! Small, self-contained toolkit for training variational autoencoders with a
//! binarized latent regularizer, built around an f64 tape autodiff core.
//!
//! The crate is organized bottom-up: [`tensor`] and [`graph`] provide the
//! numerical substrate, [`latent`] the regularizer math, [`model`] the VAE
//! variants and training loop, [`data`]/[`metrics`]/[`replay`]/[`analysis`]
//! the MNIST pipeline, evaluation protocol, continual-learning loop and
//! density analysis, and [`cli`] the command-line entry points.
//!
//! Everything is deterministic given a seed: one named PRNG stream
//! ([`rng::Rng`], ChaCha8), fixed iteration orders, no threads.

pub mod analysis;
pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod graph;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pgm;
pub mod replay;
pub mod rng;
pub mod tensor;
