//! Deterministic child-seed derivation.
//!
//! Every random stream in an experiment is seeded from the master seed and
//! the task coordinates `(stage, outer fold, inner fold, grid index, ...)`,
//! folded through the SplitMix64 finalizer. The mapping is fixed so runs are
//! reproducible across platforms and across sequential/parallel execution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for a task identified by `path` under `master`.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(master), |acc, &part| splitmix(acc ^ splitmix(part)))
}

/// The generator used for every seeded stream in the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
