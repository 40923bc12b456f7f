//! Graph attention layers with exact gradient bookkeeping.
//!
//! This crate implements GAT and GATE attention layers (plus their
//! weight-sharing variants and plain perceptron layers) on top of a small
//! dense-f64 tensor type with tape-based reverse-mode differentiation.
//! Around the layers it provides:
//!
//! * CSR graphs, Erdős–Rényi generation, and self-loop handling ([`graph`]),
//! * looks-linear orthogonal / Xavier / zero initialization ([`init`]),
//! * full-batch Adam training with per-epoch traces ([`train`]),
//! * the gradient conservation-law residuals and rescale transforms that
//!   couple parameter–gradient inner products across layers ([`conservation`]),
//! * synthetic self-sufficient and neighbor-dependent node-classification
//!   generators with K-means labeling ([`synth`]),
//! * self-attention (`alpha_vv`) traces, smoothness energies, and edge
//!   homophily ([`diagnostics`]).
//!
//! The crate is `no_std`-compatible (with `alloc`); all float math goes
//! through `libm` so results are identical with and without `std`. Anything
//! that touches files, JSON configs, or plotting lives in the companion CLI
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod conservation;
pub mod diagnostics;
pub mod graph;
pub mod init;
pub mod layers;
pub mod optim;
pub mod reference;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub(crate) mod math;

pub use graph::Graph;
pub use rng::SplitMix64;
pub use tensor::Tensor;
