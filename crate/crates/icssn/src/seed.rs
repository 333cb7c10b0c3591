//! Deterministic seed derivation.
//!
//! Every stochastic component (weight init, augmentation, pair sampling,
//! dropout, shuffling) draws from its own [`rand_chacha::ChaCha8Rng`] whose
//! seed is derived from the run seed plus a purpose string and optional
//! indices.  Two runs with the same seed therefore produce bit-identical
//! streams regardless of how many RNG draws each component makes, and
//! changing one component's consumption cannot perturb another's.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 32-byte seed from the run seed and a purpose label.
///
/// `indices` refines the stream, e.g. `&[epoch, batch]` so each batch of each
/// epoch gets an independent generator.
pub fn derive_seed(run_seed: u64, purpose: &str, indices: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(run_seed.to_le_bytes());
    hasher.update([0xfe]); // domain separator between seed and label
    hasher.update(purpose.as_bytes());
    for &ix in indices {
        hasher.update([0xff]);
        hasher.update(ix.to_le_bytes());
    }
    hasher.finalize().into()
}

/// A ChaCha8 generator for `purpose`, refined by `indices`.
pub fn rng_for(run_seed: u64, purpose: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(run_seed, purpose, indices))
}

/// Folds an index into a seed, producing an independent child seed (for
/// APIs that take a plain `u64` rather than a generator).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let bytes = derive_seed(seed, "mix", &[index]);
    u64::from_le_bytes(bytes[..8].try_into().expect("eight bytes"))
}
