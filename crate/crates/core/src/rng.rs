//! Named, seed-derived random streams.
//!
//! Every consumer draws from `stream(seed, label, index)`, so adding a new
//! consumer never shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, label: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(1, "x", 0).random();
        assert_eq!(a, stream(1, "x", 0).random::<u64>());
        assert_ne!(a, stream(1, "x", 1).random::<u64>());
        assert_ne!(a, stream(1, "y", 0).random::<u64>());
        assert_ne!(a, stream(2, "x", 0).random::<u64>());
    }
}
