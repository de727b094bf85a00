//! Named random streams derived from one user seed.
//!
//! Every consumer of randomness asks for its own stream by name (and
//! optionally an index such as a step or sample number), so streams never
//! perturb each other: drawing a mixing coefficient cannot shift the data
//! order, and resuming at step `k` only needs `k`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// 64-bit seed for `(seed, name, index)`.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream(seed: u64, name: &str) -> StreamRng {
    stream_at(seed, name, 0)
}

pub fn stream_at(seed: u64, name: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "mix").random();
        let b: u64 = stream(7, "mix").random();
        let c: u64 = stream(7, "order").random();
        let d: u64 = stream_at(7, "mix", 1).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
