//! Domain-conditioned channel attention networks for unsupervised domain
//! adaptation.
//!
//! The crate is `no_std` (with `alloc`) and contains only the numerical
//! pieces: a dense reverse-mode tape, the attention and routing modules, the
//! kernel discrepancy, the feature adaptation blocks, the training objective
//! and the seeded synthetic benchmark generator. File formats, configuration
//! parsing and the command line live in the `gdcan` crate.

#![no_std]
// `!(x > 0.0)` is how the range checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adaptation;
pub mod attention;
pub mod checks;
pub mod data;
pub mod diagnostics;
mod error;
pub mod gradcheck;
pub mod layers;
mod linalg;
pub mod math;
pub mod mmd;
pub mod model;
pub mod objective;
pub mod optim;
pub mod routing;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
