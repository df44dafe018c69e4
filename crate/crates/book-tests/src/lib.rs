//! mdbook cannot resolve workspace dependencies when testing listings, so
//! each chapter is included as a module doc and run by `cargo test --doc`.
//! One module per chapter keeps failures attributable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/synthesis.md")]
pub mod synthesis {}
#[doc = include_str!("../../../book/src/datasets.md")]
pub mod datasets {}
#[doc = include_str!("../../../book/src/metric.md")]
pub mod metric {}
#[doc = include_str!("../../../book/src/distinguish.md")]
pub mod distinguish {}
#[doc = include_str!("../../../book/src/probes.md")]
pub mod probes {}
#[doc = include_str!("../../../book/src/psychophysics.md")]
pub mod psychophysics {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
