pub mod alignment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod senses;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Independent random streams derived from the one user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Batches,
    Encoder,
    Senses,
    Projection,
    Synthetic,
}

/// Mixes `seed` with the stream id (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    let mut z = seed ^ (stream as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
