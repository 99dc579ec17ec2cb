//! Probabilistic WiFi radio maps.

pub mod data;
pub mod dgp;
pub mod error;
pub mod eval;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod optim;
pub mod pipeline;
pub mod positioning;
pub mod replicates;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/gp.md")]
    mod gp {}
    #[doc = include_str!("../../../book/src/dgp.md")]
    mod dgp {}
    #[doc = include_str!("../../../book/src/positioning.md")]
    mod positioning {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/levene.md")]
    mod levene {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
