//! Runs the guide's code snippets as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/splits.md")]
pub mod splits {}

#[doc = include_str!("../../../book/src/balance.md")]
pub mod balance {}

#[doc = include_str!("../../../book/src/crops.md")]
pub mod crops {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/meta.md")]
pub mod meta {}

#[doc = include_str!("../../../book/src/ensemble.md")]
pub mod ensemble {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
