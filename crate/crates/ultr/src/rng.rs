//! Deterministic RNG streams.
//!
//! Every randomized operation draws from its own stream derived from
//! `(user seed, stream tag)`, so adding randomness to one operation never
//! perturbs another. Streams are derived with SplitMix64, which is
//! platform-independent, and fed into ChaCha8.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. One per independent consumer of randomness.
pub mod stream {
    pub const SPLIT: u64 = 0x5350_4c49_5400_0001;
    pub const SIM_SESSION: u64 = 0x5349_4d53_0000_0002;
    pub const POLICY_WEIGHTS: u64 = 0x504f_4c57_0000_0003;
    pub const MODEL_INIT: u64 = 0x494e_4954_0000_0004;
    pub const EPOCH_SHUFFLE: u64 = 0x5348_5546_0000_0005;
    pub const DROPOUT: u64 = 0x4452_4f50_0000_0006;
    pub const RANDOM_BASELINE: u64 = 0x5242_4153_0000_0007;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mix a user seed with a stream tag (and optional substream index) into
/// a single 64-bit seed.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ splitmix64(index))
}

/// ChaCha8 generator for `(seed, tag, index)`. Identical inputs yield an
/// identical byte stream on every platform.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}
