//! Named random substreams derived from a single root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a 64-bit seed for `name` from `root`. Distinct names give
/// independent streams, so toggling one consumer never shifts another.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn substream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(substream_seed(root, name))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
