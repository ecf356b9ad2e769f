//! Deterministic RNG stream derivation.
//!
//! Every random draw in the simulator comes from a ChaCha stream keyed by the
//! master seed, a purpose tag and a tuple of integer ids (client, round, ...),
//! so results do not depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn derive_key(master: u64, tag: &str, ids: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for id in ids {
        h.update(id.to_le_bytes());
    }
    h.finalize().into()
}

pub fn stream(master: u64, tag: &str, ids: &[u64]) -> StreamRng {
    ChaCha8Rng::from_seed(derive_key(master, tag, ids))
}
