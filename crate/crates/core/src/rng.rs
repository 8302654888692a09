//! Seed derivation.
//!
//! Every random stream in the crate is derived by hashing a global seed with
//! a label (a parameter name, or an `(epoch, sample)` tuple), so results never
//! depend on the order in which streams are created or consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Generator for `seed` and a tuple of integer labels.
pub fn derive(seed: u64, labels: &[u64]) -> StreamRng {
    let mut h = Sha256::new();
    h.update(b"ints");
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update(l.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Generator for `seed` and a string label.
pub fn derive_named(seed: u64, name: &str) -> StreamRng {
    let mut h = Sha256::new();
    h.update(b"name");
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Short stable hex digest of arbitrary text.
pub fn digest_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
