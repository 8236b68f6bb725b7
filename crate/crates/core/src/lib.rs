//! Permutation-equivariant multidimensional GNNs with graph information
//! bottleneck training for cell-free massive MIMO precoding and power control.

pub mod baselines;
pub mod channel;
pub mod error;
pub mod gib;
pub mod model;
pub mod perm;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
