//! Low-rank weight approximation and residual-freeze adapters.
//!
//! The crate factors pretrained weight matrices as `W0 ≈ B·A` by running Adam
//! on the reconstruction error, freezes the residual `W0 − B·A`, and builds
//! adapted linear layers whose trainable low-rank pair starts from that
//! factorization or from one of several random initializations. A small
//! harness reproduces the associated analysis experiments on toy models.

pub mod adapters;
pub mod approx;
pub mod error;
pub mod harness;
pub mod optim;
pub mod stats;
pub mod tensor;
pub mod wtn;

pub use error::{Error, Result};
pub use tensor::{Dtype, Matrix};
