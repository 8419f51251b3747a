//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness (task generation, demonstration sampling,
//! template choice, training) draws from its own ChaCha stream, so changing
//! how much one consumer draws never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable that overrides `--seed` on the command line.
pub const SEED_ENV: &str = "RESDECOMP_SEED";

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// ChaCha8 generator for `(seed, name)`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Derives a child seed, for APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    use rand::RngCore;
    substream(seed, name).next_u64()
}
