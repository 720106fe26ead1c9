//! The guide's chapters, compiled as documentation so that every Rust snippet
//! in `book/src` runs as a doc-test.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/sphere.md")]
pub mod sphere {}

#[doc = include_str!("../../../book/src/objectives.md")]
pub mod objectives {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cost.md")]
pub mod cost {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
