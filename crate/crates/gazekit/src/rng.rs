//! Labeled seed derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha stream derived
//! from `(master seed, label, index)`. Reruns with the same master seed are
//! bit-identical, and parallel consumers (per-sample, per-fold, per-epoch)
//! get independent streams no matter the execution order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 32-byte seed from a master seed, a label, and an index.
pub fn derive_seed(master: u64, label: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(label.as_bytes());
    hasher.update([0x1f]);
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}

/// ChaCha stream for `(master, label, index)`.
pub fn rng_for(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master, label, index))
}

/// Derive a child `u64` master seed, for handing a whole subsystem its own
/// seed space.
pub fn derive_master(master: u64, label: &str, index: u64) -> u64 {
    let bytes = derive_seed(master, label, index);
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}
