//! Deterministic seed derivation.
//!
//! Every stochastic choice in a run is driven by a child seed derived from
//! the master seed, the round index, the participant id and a purpose tag.
//! This makes each random draw attributable and lets independent components
//! draw without correlating.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit child seed as the first 8 bytes of
/// `SHA-256(master || round || participant || tag)`, all integers big-endian.
pub fn child_seed(master: u64, round: u64, participant: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_be_bytes());
    h.update(round.to_be_bytes());
    h.update(participant.to_be_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

/// RNG for a derived seed.
pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
