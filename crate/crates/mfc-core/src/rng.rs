//! Deterministic stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream derived from a
//! run seed plus a short list of integer tags (stream id, iteration,
//! partition index, ...). Streams are independent of thread scheduling and of
//! how many draws other streams consumed, which is what makes rollouts,
//! updates, and resume-from-checkpoint bit-reproducible: reconstructing the
//! same (seed, tags) always yields the same stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the major consumers of randomness. Keeping them in one
/// place avoids accidental collisions between call sites.
pub mod stream {
    pub const INIT_POLICY: u64 = 1;
    pub const INIT_CRITIC: u64 = 2;
    pub const ROLLOUT: u64 = 3;
    pub const UPDATE_SHUFFLE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const CHAOS: u64 = 6;
    pub const BENCH: u64 = 7;
    pub const OPENLOOP: u64 = 8;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from a seed and a tag path.
///
/// The 256-bit ChaCha key is filled by iterating splitmix64 over a state that
/// has absorbed the seed and every tag, so distinct tag paths give unrelated
/// keys. Deterministic across platforms and thread counts.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    let _ = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x2545_f491_4f6c_dd1d);
        let _ = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
