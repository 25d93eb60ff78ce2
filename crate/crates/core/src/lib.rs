pub mod datasets;
pub mod error;
pub mod model_zoo;
pub mod generative_replay;
pub mod client_update;
pub mod config;
pub mod fed_orchestrator;
pub mod metrics;
pub mod seed;

pub use error::{Error, Result};
pub use mfcl_grad;

// The guide's listings run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/generator.md")]
    mod generator {}
    #[doc = include_str!("../../../book/src/client.md")]
    mod client {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/superimagenet.md")]
    mod superimagenet {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
