//! Rectified-flow toy lab for few-shot concept customization.
//!
//! [`net`] holds the conditional velocity network and its checkpoints,
//! [`flow`] the flow-matching loss, guidance and sampler, [`data`] the
//! synthetic scenes, [`customization`] the two-stage concept insertion, and
//! [`eval`] the drift and fidelity metrics.

pub mod condition;
pub mod customization;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod net;

pub use condition::{Condition, Role, TokenId, NULL_TOKEN};
pub use error::{Error, Result};
pub use net::{NetworkConfig, VelocityNetwork};

/// Independent child seed for `stream`, via a splitmix64 step.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
