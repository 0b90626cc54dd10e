pub mod cone;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod lyapunov;
pub mod models;
pub mod rng;
pub mod symplectic;

pub use error::{Error, Result};

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/covariance-cone.md")]
    struct CovarianceCone;
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/riccati.md")]
    struct Riccati;
    #[doc = include_str!("../../../book/src/symplectic.md")]
    struct Symplectic;
    #[doc = include_str!("../../../book/src/lyapunov.md")]
    struct Lyapunov;
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    struct Diagnostics;
    #[doc = include_str!("../../../book/src/experiments.md")]
    struct Experiments;
}
