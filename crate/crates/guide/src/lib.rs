//! The chapters of `book/`, one module each, so `cargo test --doc` runs
//! every snippet in the book.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/geometry.md")]
pub mod chapter1 {}
#[doc = include_str!("../../../book/src/sampling.md")]
pub mod chapter2 {}
#[doc = include_str!("../../../book/src/conic-convolution.md")]
pub mod chapter3 {}
#[doc = include_str!("../../../book/src/network.md")]
pub mod chapter4 {}
#[doc = include_str!("../../../book/src/search.md")]
pub mod chapter5 {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod chapter6 {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod chapter7 {}
