//! Counter-based random substreams.
//!
//! Every random draw in the crate comes from a stream addressed by a master
//! seed and a path of integers (purpose tag, replication, member index...).
//! Two different paths give statistically independent ChaCha streams, and the
//! same path always reproduces the same stream, regardless of which thread
//! or in which order the stream is consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Purpose tags keep streams of different stages apart.
pub mod tag {
    pub const PRIOR_SAMPLE: u64 = 0x5052_494f;
    pub const TRUTH: u64 = 0x5452_5554;
    pub const SYNTH_NOISE: u64 = 0x4e4f_4953;
    pub const PERTURB: u64 = 0x5045_5254;
    pub const MEMBERS: u64 = 0x4d45_4d42;
    pub const REPLICATION: u64 = 0x5245_504c;
    pub const CHAIN: u64 = 0x4348_4149;
    pub const TUNING: u64 = 0x5455_4e45;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Independent generator for `(seed, path)`.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    let mut state = derive_seed(seed, path);
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}
