#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod config;
pub mod datagen;
pub mod dpmoe;
pub mod error;
pub mod evalkit;
pub mod experiments;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod numcore;
pub mod objectives;
pub mod trainkit;
pub mod views;

pub use error::{Error, Result};

/// Runs the guide's code listings as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    pub mod tape {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/routing.md")]
    pub mod routing {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
