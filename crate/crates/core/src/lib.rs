//! Decoupled gradient harmonizing for detectors trained on partially
//! annotated data.
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doctests of this crate.

pub mod error;
pub mod experiment;
pub mod harmonizer;
pub mod label;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
pub use label::{ImageClass, Label};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/harmonizing.md")]
    mod harmonizing {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
