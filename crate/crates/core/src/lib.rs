//! Adaptive latent pondering on a frozen toy backbone.
//!
//! A small halting controller decides, step by step, whether to keep nudging
//! a backbone's hidden state along a steering direction or to stop and decode.
//! The controller is trained with group-relative policy gradients against a
//! multi-component reward under a teacher-to-student curriculum.
//!
//! Start with [`harness::train`] for the full loop, or compose the pieces:
//! [`backbone::Backbone`], [`steering::extract`], [`ponder::run`],
//! [`controller::Controller`], [`reward`], [`grpo`] and [`curriculum`].

pub mod backbone;
pub mod controller;
pub mod curriculum;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod numerics;
pub mod ponder;
pub mod reward;
pub mod steering;
pub mod tasks;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/pondering.md")]
    mod pondering {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
