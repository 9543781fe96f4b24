//! Deterministic seed derivation.
//!
//! Every random draw in this crate comes from a [`ChaCha8Rng`] whose seed is
//! derived from the master seed, a domain label, and the indices that locate
//! the work item (fold coordinates, resample id, epoch, ...). Two work items
//! never share a stream, so results do not depend on execution order or on
//! the number of worker threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed, a domain label, and work-item indices into one seed.
pub fn derive_seed(master: u64, domain: &str, indices: &[u64]) -> u64 {
    let mut s = splitmix64(master ^ fnv1a(domain.as_bytes()));
    for &ix in indices {
        s = splitmix64(s ^ splitmix64(ix));
    }
    s
}

/// RNG for the work item identified by `(master, domain, indices)`.
pub fn rng_for(master: u64, domain: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, indices))
}
