//! Coupled bridge matching for Schrödinger bridges.
//!
//! A single network carries a forward and a backward drift; each is fitted
//! to reference-bridge targets built from paths of the other. The crate also
//! has exact oracles, KL and conditional Bures-Wasserstein diagnostics, and a
//! Gaussian Sinkhorn flow. See the guide under `book/`.

pub mod bm2;
pub mod dist;
pub mod error;
pub mod flow;
pub mod ibm;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod reference;
pub mod rng;
pub mod suite;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/bridges.md")]
    mod bridges {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/ibm.md")]
    mod ibm {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/checks.md")]
    mod checks {}
}
