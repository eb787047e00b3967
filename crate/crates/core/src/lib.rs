//! Exact-likelihood autoregressive distributions over 3D rotations.
//!
//! A rotation is stored as a canonical unit quaternion; its imaginary part is
//! quantized into three bin labels which a conditional scorer predicts one at
//! a time. The resulting mixture of uniform slabs has a closed-form density on
//! SO(3).

pub mod binning;
pub mod checkpoint;
pub mod density;
pub mod error;
pub mod eval;
pub mod grid;
pub mod nn;
pub mod sampler;
pub mod scorer;
pub mod so3;
pub mod toy;
pub mod train;

pub use binning::{BinPartition, LegalityMask, QuaternionSentence};
pub use density::{MixtureProportions, MogHeadOutput};
pub use error::{Error, Result};
pub use scorer::{ConditioningCache, HeadKind, ScorerConfig, ScorerParameters};
pub use so3::{RotationMatrix, RotationVector, UnitQuaternion};
pub use toy::{ToyModeSet, ToySample};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quaternions.md")]
    mod quaternions {}
    #[doc = include_str!("../../../book/src/bins.md")]
    mod bins {}
    #[doc = include_str!("../../../book/src/density.md")]
    mod density {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/baseline.md")]
    mod baseline {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
