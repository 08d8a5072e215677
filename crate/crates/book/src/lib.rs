//! Runs the code blocks of the guide in `book/src` as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/schema.md")]
pub mod schema {}
#[doc = include_str!("../../../book/src/perturbation.md")]
pub mod perturbation {}
#[doc = include_str!("../../../book/src/crafting.md")]
pub mod crafting {}
#[doc = include_str!("../../../book/src/defense.md")]
pub mod defense {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
