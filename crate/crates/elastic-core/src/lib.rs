//! Core of an elastic transformer supernet that trains once and then serves
//! many nested submodels of different widths and depths.
//!
//! Everything in this crate is `no_std + alloc` and generic over the scalar
//! type, so the same code paths run in `f32` for speed and in `f64` when
//! bit-reproducibility or gradient checking demands it. The crate is split
//! along the lifecycle of a supernet:
//!
//! * [`tape`] — dense 2-D tensors and reverse-mode autodiff,
//! * [`backbone`] — the elastic transformer itself: parameter store,
//!   submodel slicing, forward passes and the exact multiply-accumulate
//!   cost model,
//! * [`importance`] — activation-based channel/head scoring and the
//!   permutations that pack important units into every nested prefix,
//! * [`curriculum`] — staged widening of the sampling space during
//!   adaptation training,
//! * [`search`] — multi-objective evolutionary search over submodel
//!   encodings,
//! * [`router`] — a small gating network that maps a compute budget to a
//!   concrete submodel, trained end-to-end with relaxed binary gates.
//!
//! File formats, dataset generation and the command-line surface live in the
//! companion `elastic-supernet` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod backbone;
pub mod codec;
mod kernels;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod importance;
pub mod optim;
pub mod rng;
pub mod router;
pub mod scalar;
pub mod search;
pub mod tape;

pub use error::{Error, Result};
pub use scalar::Scalar;
