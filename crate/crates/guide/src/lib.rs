//! Runs the Rust listings of the `book/` guide as doc-tests.
//!
//! mdbook cannot link external crates when testing, so each chapter is
//! included here as the docs of an empty module.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/ingest.md")]
pub mod ingest {}
#[doc = include_str!("../../../book/src/geo.md")]
pub mod geo {}
#[doc = include_str!("../../../book/src/render.md")]
pub mod render {}
#[doc = include_str!("../../../book/src/augment.md")]
pub mod augment {}
#[doc = include_str!("../../../book/src/kde.md")]
pub mod kde {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/directional.md")]
pub mod directional {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../README.md")]
pub mod readme {}
