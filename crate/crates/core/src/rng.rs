//! Deterministic random-stream derivation.
//!
//! Every source of randomness in a run is a ChaCha stream derived from the
//! single run seed plus a list of labels (round, sender, purpose). Streams
//! are never shared between consumers, so the order in which independent
//! steps execute can never change what any one of them draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 32-byte seed from the root seed and a label path.
///
/// Labels are length-prefixed before hashing so distinct paths can never
/// collide by concatenation (`["ab","c"]` vs `["a","bc"]`).
pub fn derive_seed(root: u64, labels: &[&str]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u32).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    seed
}

/// Derive an independent random stream for one labeled purpose.
pub fn derive_rng(root: u64, labels: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(root, labels))
}

/// Derive a plain `u64` sub-seed (for components that take a seed, not a stream).
pub fn derive_u64(root: u64, labels: &[&str]) -> u64 {
    let seed = derive_seed(root, labels);
    u64::from_le_bytes(seed[..8].try_into().unwrap())
}
