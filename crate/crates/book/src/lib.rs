//! The guide in `book/` is written for mdbook, which cannot run listings that
//! depend on workspace crates. Each chapter is included here as the docs of an
//! empty module instead, so `cargo test` runs every listing as a doc-test and
//! the book cannot drift from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/task-graphs.md")]
pub mod task_graphs {}
#[doc = include_str!("../../../book/src/transport.md")]
pub mod transport {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/selection.md")]
pub mod selection {}
#[doc = include_str!("../../../book/src/probes.md")]
pub mod probes {}
#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../README.md")]
pub mod readme {}
