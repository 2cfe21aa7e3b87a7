//! Toolkit for turning decoder-only transformer checkpoints into
//! encoder-decoder models and training and measuring the result.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod datapipe;
pub mod error;
pub mod evalbench;
pub mod io;
pub mod model;
pub mod surgery;
pub mod tensor;
pub mod trainer;

pub use autodiff::{grad_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Float, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/surgery.md")]
    mod surgery {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
}
