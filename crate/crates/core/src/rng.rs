//! Seed derivation for independent random streams.
//!
//! Every generator in the crate takes an explicit stream. Streams for
//! independent units of work (requests, epochs, click draws) are derived from
//! a base seed and a small tuple of labels so they can be created in any order
//! or in parallel and still be identical run to run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of labels into a new 64-bit seed.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix(base), |acc, &l| splitmix(acc ^ splitmix(l)))
}

pub fn stream(base: u64, labels: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(base, labels))
}

/// A uniform draw in [0, 1) that is a pure function of its inputs.
///
/// Used for click simulation so that two methods displaying the same ad on the
/// same request see the same click outcome (common random numbers).
pub fn unit_hash(base: u64, labels: &[u64]) -> f64 {
    (derive_seed(base, labels) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
