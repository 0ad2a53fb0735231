//! Deterministic random streams.
//!
//! Every consumer of randomness asks for a stream by `(seed, key path)`. The
//! key path is folded into a single 64-bit value with the SplitMix64
//! finalizer:
//!
//! ```text
//! h = splitmix64(seed)
//! for k in keys: h = splitmix64(h ^ splitmix64(k))
//! ```
//!
//! and `h` seeds a ChaCha8 generator through `SeedableRng::seed_from_u64`.
//! Streams for different key paths are statistically independent, and a
//! stream depends only on its key path, never on the order in which streams
//! are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep the streams of different subsystems apart.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_DROPOUT: u64 = 3;
    pub const MC_DROPOUT: u64 = 4;
    pub const SYNTH_SAMPLE: u64 = 5;
    pub const SYNTH_OOD: u64 = 6;
    pub const MASK_LAYER: u64 = 7;
    pub const PREDICT_SAMPLE: u64 = 8;
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a seed and key path into a derived 64-bit seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |h, &k| splitmix64(h ^ splitmix64(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}
